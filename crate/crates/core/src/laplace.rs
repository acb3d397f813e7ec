//! Linearized Laplace inference restricted to a subnetwork of the
//! representation parameters.
//!
//! The pipeline is: MAP training under a Gaussian prior ([`map_train`]),
//! choosing the subnetwork `S` as the parameters with the largest prior
//! variances ([`select_subnetwork`]), assembling the generalized Gauss-Newton
//! precision over `S` ([`assemble_ggn`]), and turning it into a Gaussian
//! posterior ([`subnet_posterior`]). Parameters outside `S` stay at their point
//! estimate. Predictions go through the linearized network with the probit
//! logit scaling ([`predictive_classify`]) or the Gaussian closed form
//! ([`predictive_regress`]).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{cholesky, cholesky_jittered, CholeskyFactor, DenseMatrix, LinalgError};
use crate::model::{adam_step, weighted_nll_and_grad, AdamHyper, AdamState, Likelihood, ModelError, RepresentationModel, Sample};
use crate::scalar::{dot, softmax, Real};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LaplaceError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("subnetwork size {requested} exceeds {available} parameters")]
    SizeTooLarge { requested: usize, available: usize },
    #[error("invalid subnetwork mask: {0}")]
    InvalidMask(String),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("invalid variances: {0}")]
    InvalidVariances(String),
    #[error("invalid training options: {0}")]
    InvalidOptions(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, LaplaceError>;

/// Sorted set of flat representation indices forming the stochastic
/// subnetwork. Its complement stays deterministic.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubnetworkMask {
    indices: Vec<usize>,
    total: usize,
}

impl SubnetworkMask {
    /// Indices must be strictly increasing and below `total` (`|R|`).
    pub fn new(indices: Vec<usize>, total: usize) -> Result<Self> {
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(LaplaceError::InvalidMask(format!(
                    "indices must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= total {
                return Err(LaplaceError::InvalidMask(format!("index {last} >= {total}")));
            }
        }
        Ok(Self { indices, total })
    }

    pub fn empty() -> Self {
        Self { indices: Vec::new(), total: 0 }
    }

    pub fn empty_of(total: usize) -> Self {
        Self { indices: Vec::new(), total }
    }

    pub fn full(total: usize) -> Self {
        Self { indices: (0..total).collect(), total }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `|R|`
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// `D = R \ S`
    pub fn complement(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total - self.indices.len());
        let mut it = self.indices.iter().peekable();
        for r in 0..self.total {
            if it.peek() == Some(&&r) {
                it.next();
            } else {
                out.push(r);
            }
        }
        out
    }

    pub fn gather<T: Copy>(&self, full: &[T]) -> Vec<T> {
        self.indices.iter().map(|&i| full[i]).collect()
    }

    /// Ratio `|S| / |R|`.
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.indices.len() as f64 / self.total as f64
        }
    }
}

/// Factorized Gaussian `N(mean, diag(variance))` over the representation
/// parameters; every variance strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior<T> {
    mean: Vec<T>,
    variance: Vec<T>,
}

impl<T: Real> GaussianPrior<T> {
    pub fn new(mean: Vec<T>, variance: Vec<T>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(LaplaceError::DimensionMismatch {
                what: "prior variance",
                expected: mean.len(),
                got: variance.len(),
            });
        }
        if let Some(v) = variance.iter().find(|v| !(**v > T::zero()) || !v.is_finite()) {
            return Err(LaplaceError::InvalidPrior(format!("variance {v} is not strictly positive")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(LaplaceError::InvalidPrior("mean is not finite".into()));
        }
        Ok(Self { mean, variance })
    }

    pub fn isotropic(mean: Vec<T>, variance: T) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, vec![variance; n])
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn variance(&self) -> &[T] {
        &self.variance
    }

    /// Returns `-log N(θ | μ, diag g)` and adds `(θ - μ) / g` into `grad`.
    pub fn neg_log_density_and_accumulate_grad(&self, theta: &[T], grad: &mut [T]) -> T {
        let half = T::lit(0.5);
        let two_pi = T::lit(2.0 * std::f64::consts::PI);
        let mut total = T::zero();
        for (((&t, &m), &g), gr) in theta.iter().zip(&self.mean).zip(&self.variance).zip(grad.iter_mut()) {
            let d = t - m;
            total += half * d * d / g + half * (two_pi * g).ln();
            *gr += d / g;
        }
        total
    }
}

/// Mini-batch Adam settings for [`map_train`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub adam: AdamHyper,
}

impl TrainOptions {
    pub fn new(epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        Self { epochs, batch_size, lr, seed, adam: AdamHyper::default() }
    }
}

/// Splits `0..n` into shuffled mini-batches for each epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// MAP estimate of `θ` under `prior` after `epochs` passes of mini-batch Adam.
///
/// Each mini-batch's likelihood term is scaled by `n / batch_len` so every step
/// estimates the full-data objective. Returns the full-data negative log
/// posterior at the final `θ`.
pub fn map_train<T: Real, M: RepresentationModel<T>>(
    model: &mut M,
    data: &[Sample<'_, T>],
    prior: &GaussianPrior<T>,
    likelihood: &Likelihood<T>,
    opts: &TrainOptions,
) -> Result<T> {
    if opts.epochs == 0 {
        return Err(LaplaceError::InvalidOptions("epochs must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(ModelError::EmptyBatch.into());
    }
    let n = data.len();
    let lr = T::lit(opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut state = AdamState::new(model.theta().len());
    let mut batch = Vec::with_capacity(opts.batch_size.min(n));
    for _ in 0..opts.epochs {
        for idx in epoch_batches(n, opts.batch_size, &mut rng) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| data[i]));
            let weight = T::from_usize_lossy(n) / T::from_usize_lossy(batch.len());
            let (_, grad) = weighted_nll_and_grad(model, &batch, prior, likelihood, weight)?;
            adam_step(&mut state, model.theta_mut(), &grad, lr, &opts.adam);
        }
    }
    let (loss, _) = weighted_nll_and_grad(model, data, prior, likelihood, T::one())?;
    Ok(loss)
}

/// Indices of the `size` largest variances (ties to the lower index), sorted
/// ascending. Minimizes `Σ_r σ²_r (1 - χ_S(r))` over all subsets of that size.
pub fn select_subnetwork<T: Real>(variances: &[T], size: usize) -> Result<SubnetworkMask> {
    let total = variances.len();
    if size > total {
        return Err(LaplaceError::SizeTooLarge { requested: size, available: total });
    }
    if let Some(v) = variances.iter().find(|v| !(**v >= T::zero()) || !v.is_finite()) {
        return Err(LaplaceError::InvalidVariances(format!("{v} is not a finite non-negative variance")));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| {
        variances[b]
            .partial_cmp(&variances[a])
            .expect("finite variances")
            .then(a.cmp(&b))
    });
    let mut chosen = order[..size].to_vec();
    chosen.sort_unstable();
    SubnetworkMask::new(chosen, total)
}

/// Diagonal squared 2-Wasserstein objective: total variance left outside the
/// subnetwork.
pub fn wasserstein_diag<T: Real>(variances: &[T], mask: &SubnetworkMask) -> T {
    let mut total = T::zero();
    let mut it = mask.indices().iter().peekable();
    for (r, &v) in variances.iter().enumerate() {
        if it.peek() == Some(&&r) {
            it.next();
        } else {
            total += v;
        }
    }
    total
}

/// `Λ = diag(p) - p pᵀ` for `p = softmax(logits)`.
pub fn lambda_softmax<T: Real>(logits: &[T]) -> DenseMatrix<T> {
    Likelihood::Categorical.hessian(logits)
}

const GGN_CHUNK: usize = 64;

/// Stacked rows `A` with `AᵀA = Σ_n J_nᵀ Λ_n J_n` over the given examples.
pub fn ggn_root_rows<T: Real, M: RepresentationModel<T>>(
    model: &M,
    data: &[Sample<'_, T>],
    mask: &SubnetworkMask,
    likelihood: &Likelihood<T>,
) -> Result<DenseMatrix<T>> {
    let o = model.output_dim();
    let s = mask.len();
    let mut rows = Vec::with_capacity(data.len() * o * s);
    for sample in data {
        let (f, jac) = model.jacobian(sample.x, mask)?;
        rows.extend_from_slice(likelihood.hessian_root_rows(&f, &jac).data());
    }
    Ok(DenseMatrix::new(data.len() * o, s, rows)?)
}

fn check_prior_len<T: Real>(prior: &GaussianPrior<T>, mask: &SubnetworkMask) -> Result<()> {
    if let Some(&last) = mask.indices().last() {
        if last >= prior.len() {
            return Err(LaplaceError::InvalidMask(format!("index {last} >= prior length {}", prior.len())));
        }
    }
    Ok(())
}

/// `Ĥ_S = Σ_n J_{n,S}ᵀ Λ_n J_{n,S} + diag(g_S⁻¹)`, exactly symmetric.
pub fn assemble_ggn<T: Real, M: RepresentationModel<T>>(
    model: &M,
    data: &[Sample<'_, T>],
    mask: &SubnetworkMask,
    prior: &GaussianPrior<T>,
    likelihood: &Likelihood<T>,
) -> Result<DenseMatrix<T>> {
    check_prior_len(prior, mask)?;
    let s = mask.len();
    let mut h = DenseMatrix::zeros(s, s);
    for chunk in data.chunks(GGN_CHUNK) {
        let at = ggn_root_rows(model, chunk, mask, likelihood)?.transpose();
        for a in 0..s {
            let ra = at.row(a);
            for b in 0..=a {
                h[(a, b)] += dot(ra, at.row(b));
            }
        }
    }
    for (k, &r) in mask.indices().iter().enumerate() {
        h[(k, k)] += T::one() / prior.variance()[r];
    }
    h.symmetrize_from_lower();
    Ok(h)
}

/// Diagonal of [`assemble_ggn`] only.
pub fn assemble_ggn_diagonal<T: Real, M: RepresentationModel<T>>(
    model: &M,
    data: &[Sample<'_, T>],
    mask: &SubnetworkMask,
    prior: &GaussianPrior<T>,
    likelihood: &Likelihood<T>,
) -> Result<Vec<T>> {
    check_prior_len(prior, mask)?;
    let mut diag: Vec<T> = mask.indices().iter().map(|&r| T::one() / prior.variance()[r]).collect();
    for chunk in data.chunks(GGN_CHUNK) {
        let rows = ggn_root_rows(model, chunk, mask, likelihood)?;
        for k in 0..rows.rows() {
            for (d, &a) in diag.iter_mut().zip(rows.row(k)) {
                *d += a * a;
            }
        }
    }
    Ok(diag)
}

/// `diag((AᵀA + diag(g)⁻¹)⁻¹)` through the Woodbury identity: with `D =
/// diag(g)` and `K = I + A D Aᵀ`, the inverse is `D - D Aᵀ K⁻¹ A D`. Costs
/// `O(m² |S|)` for `m` rows instead of `O(|S|³)`.
pub fn woodbury_marginal_variances<T: Real>(rows: &DenseMatrix<T>, prior_var: &[T]) -> Result<Vec<T>> {
    let (m, s) = (rows.rows(), rows.cols());
    if prior_var.len() != s {
        return Err(LaplaceError::DimensionMismatch { what: "prior variance", expected: s, got: prior_var.len() });
    }
    let mut ad = rows.clone();
    for k in 0..m {
        for (v, &g) in ad.row_mut(k).iter_mut().zip(prior_var) {
            *v *= g;
        }
    }
    let mut kmat = DenseMatrix::identity(m);
    for a in 0..m {
        for b in 0..=a {
            kmat[(a, b)] += dot(ad.row(a), rows.row(b));
        }
    }
    kmat.symmetrize_from_lower();
    let (chol, _) = cholesky_jittered(&kmat)?;
    chol.forward_substitute(&mut ad)?;
    let mut out = prior_var.to_vec();
    for k in 0..m {
        for (o, &w) in out.iter_mut().zip(ad.row(k)) {
            *o -= w * w;
        }
    }
    Ok(out)
}

/// Covariance structure over the subnetwork.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CovarianceKind {
    /// Full `|S| x |S|` precision.
    Full,
    /// Diagonal precision (factorized posterior).
    Diagonal,
}

/// Marginal posterior variances over `S` at the model's current `θ`,
/// without materializing a [`SubnetPosterior`].
///
/// The full-covariance route uses [`woodbury_marginal_variances`] whenever the
/// GGN has fewer rows than `|S|` and the dense Cholesky route otherwise; both
/// agree to rounding.
pub fn subnet_marginal_variances<T: Real, M: RepresentationModel<T>>(
    model: &M,
    data: &[Sample<'_, T>],
    mask: &SubnetworkMask,
    prior: &GaussianPrior<T>,
    likelihood: &Likelihood<T>,
    kind: CovarianceKind,
) -> Result<Vec<T>> {
    check_prior_len(prior, mask)?;
    if mask.is_empty() {
        return Ok(Vec::new());
    }
    match kind {
        CovarianceKind::Diagonal => {
            let d = assemble_ggn_diagonal(model, data, mask, prior, likelihood)?;
            Ok(d.into_iter().map(|p| T::one() / p).collect())
        }
        CovarianceKind::Full => {
            let rows_needed = data.len() * model.output_dim();
            if rows_needed < mask.len() {
                let rows = ggn_root_rows(model, data, mask, likelihood)?;
                woodbury_marginal_variances(&rows, &mask.gather(prior.variance()))
            } else {
                let h = assemble_ggn(model, data, mask, prior, likelihood)?;
                let (chol, _) = cholesky_jittered(&h)?;
                Ok(chol.inverse_diagonal())
            }
        }
    }
}

/// Precision of the subnetwork posterior.
#[derive(Debug, Clone, PartialEq)]
pub enum PosteriorPrecision<T> {
    Full(CholeskyFactor<T>),
    Diagonal(Vec<T>),
}

/// `q(θ_S) = N(mean, Ĥ_S⁻¹)`; parameters outside the mask are point masses at
/// the linearization point.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetPosterior<T> {
    pub mask: SubnetworkMask,
    pub mean: Vec<T>,
    pub precision: PosteriorPrecision<T>,
    /// Diagonal jitter that was needed to factor the precision.
    pub jitter: T,
}

impl<T: Real> SubnetPosterior<T> {
    /// Fully deterministic posterior.
    pub fn point_mass(total: usize) -> Self {
        Self {
            mask: SubnetworkMask::empty_of(total),
            mean: Vec::new(),
            precision: PosteriorPrecision::Diagonal(Vec::new()),
            jitter: T::zero(),
        }
    }

    /// Marginal variances over `S`, in mask order.
    pub fn subnet_variances(&self) -> Vec<T> {
        match &self.precision {
            PosteriorPrecision::Full(chol) => chol.inverse_diagonal(),
            PosteriorPrecision::Diagonal(p) => p.iter().map(|&v| T::one() / v).collect(),
        }
    }

    /// Dense `Ĥ_S⁻¹`.
    pub fn covariance(&self) -> DenseMatrix<T> {
        match &self.precision {
            PosteriorPrecision::Full(chol) => chol.inverse(),
            PosteriorPrecision::Diagonal(p) => {
                DenseMatrix::from_diag(&p.iter().map(|&v| T::one() / v).collect::<Vec<_>>())
            }
        }
    }
}

/// Wraps `θ_MAP` and a full GGN precision into a posterior, applying the
/// jitter ladder if the factorization fails.
pub fn subnet_posterior<T: Real>(
    theta_map: &[T],
    mask: &SubnetworkMask,
    ggn: &DenseMatrix<T>,
) -> Result<SubnetPosterior<T>> {
    if ggn.rows() != mask.len() {
        return Err(LaplaceError::DimensionMismatch { what: "GGN", expected: mask.len(), got: ggn.rows() });
    }
    check_theta(theta_map, mask)?;
    let (chol, jitter) = if mask.is_empty() {
        (cholesky(&DenseMatrix::zeros(0, 0))?, T::zero())
    } else {
        cholesky_jittered(ggn)?
    };
    Ok(SubnetPosterior { mask: mask.clone(), mean: mask.gather(theta_map), precision: PosteriorPrecision::Full(chol), jitter })
}

/// Factorized counterpart of [`subnet_posterior`] from a diagonal precision.
pub fn subnet_posterior_diagonal<T: Real>(
    theta_map: &[T],
    mask: &SubnetworkMask,
    diag_precision: Vec<T>,
) -> Result<SubnetPosterior<T>> {
    if diag_precision.len() != mask.len() {
        return Err(LaplaceError::DimensionMismatch {
            what: "diagonal precision",
            expected: mask.len(),
            got: diag_precision.len(),
        });
    }
    check_theta(theta_map, mask)?;
    if let Some(i) = diag_precision.iter().position(|p| !(*p > T::zero())) {
        return Err(LinalgError::NotPositiveDefinite { pivot: i }.into());
    }
    Ok(SubnetPosterior {
        mask: mask.clone(),
        mean: mask.gather(theta_map),
        precision: PosteriorPrecision::Diagonal(diag_precision),
        jitter: T::zero(),
    })
}

fn check_theta<T>(theta: &[T], mask: &SubnetworkMask) -> Result<()> {
    if theta.len() != mask.total() {
        return Err(LaplaceError::DimensionMismatch { what: "theta", expected: mask.total(), got: theta.len() });
    }
    Ok(())
}

/// `diag(Ĥ_S⁻¹)` scattered into a length-`|R|` vector, zero off the mask.
pub fn marginal_variances<T: Real>(post: &SubnetPosterior<T>) -> Vec<T> {
    scatter(&post.mask, &post.subnet_variances())
}

pub fn scatter<T: Real>(mask: &SubnetworkMask, values: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); mask.total()];
    for (&r, &v) in mask.indices().iter().zip(values) {
        out[r] = v;
    }
    out
}

fn check_posterior<T: Real, M: RepresentationModel<T>>(model: &M, post: &SubnetPosterior<T>) -> Result<()> {
    if post.mask.total() != model.theta().len() {
        return Err(LaplaceError::DimensionMismatch {
            what: "posterior mask",
            expected: model.theta().len(),
            got: post.mask.total(),
        });
    }
    Ok(())
}

/// Outputs `f(x)` at the linearization point and the linearized output
/// covariance `Σ(x) = J̃ Ĥ_S⁻¹ J̃ᵀ` (`O x O`).
pub fn predictive_covariance<T: Real, M: RepresentationModel<T>>(
    model: &M,
    x: &[T],
    post: &SubnetPosterior<T>,
) -> Result<(Vec<T>, DenseMatrix<T>)> {
    check_posterior(model, post)?;
    let o = model.output_dim();
    if post.mask.is_empty() {
        return Ok((model.forward(x)?, DenseMatrix::zeros(o, o)));
    }
    let (f, jac) = model.jacobian(x, &post.mask)?;
    let sigma = match &post.precision {
        PosteriorPrecision::Full(chol) => {
            let mut v = jac.transpose();
            chol.forward_substitute(&mut v)?;
            let vt = v.transpose();
            let mut sigma = DenseMatrix::zeros(o, o);
            for a in 0..o {
                for b in 0..=a {
                    let s = dot(vt.row(a), vt.row(b));
                    sigma[(a, b)] = s;
                    sigma[(b, a)] = s;
                }
            }
            sigma
        }
        PosteriorPrecision::Diagonal(p) => {
            let mut sigma = DenseMatrix::zeros(o, o);
            for a in 0..o {
                for b in 0..=a {
                    let s = jac.row(a).iter().zip(jac.row(b)).zip(p).map(|((&ja, &jb), &pk)| ja * jb / pk).sum();
                    sigma[(a, b)] = s;
                    sigma[(b, a)] = s;
                }
            }
            sigma
        }
    };
    Ok((f, sigma))
}

/// `κ_o = (1 + π Σ_oo / 8)^(-1/2)`
pub fn probit_scale<T: Real>(sigma_diag: &[T]) -> Vec<T> {
    let c = T::lit(std::f64::consts::PI / 8.0);
    sigma_diag.iter().map(|&s| (T::one() + c * s).sqrt().recip()).collect()
}

/// Softmax of `κ ⊙ f`: the multiclass probit approximation of the
/// linearized predictive.
pub fn probit_softmax<T: Real>(f: &[T], sigma_diag: &[T]) -> Vec<T> {
    let scaled: Vec<T> = f.iter().zip(probit_scale(sigma_diag)).map(|(&fo, k)| fo * k).collect();
    softmax(&scaled)
}

/// Class probabilities under the linearized subnetwork posterior.
pub fn predictive_classify<T: Real, M: RepresentationModel<T>>(
    model: &M,
    x: &[T],
    post: &SubnetPosterior<T>,
) -> Result<Vec<T>> {
    let (f, sigma) = predictive_covariance(model, x, post)?;
    Ok(probit_softmax(&f, &sigma.diagonal()))
}

const PREDICT_BATCH: usize = 24;

/// [`predictive_classify`] for many inputs; the triangular solves against the
/// posterior factor are shared across a batch. Results are identical to the
/// single-input path.
pub fn predictive_classify_batch<T: Real, M: RepresentationModel<T>>(
    model: &M,
    xs: &[&[T]],
    post: &SubnetPosterior<T>,
) -> Result<Vec<Vec<T>>> {
    check_posterior(model, post)?;
    let chol = match &post.precision {
        PosteriorPrecision::Full(chol) if !post.mask.is_empty() => chol,
        _ => return xs.iter().map(|x| predictive_classify(model, x, post)).collect(),
    };
    let o = model.output_dim();
    let s = post.mask.len();
    let mut out = Vec::with_capacity(xs.len());
    for group in xs.chunks(PREDICT_BATCH) {
        let k = group.len() * o;
        let mut rhs = DenseMatrix::zeros(s, k);
        let mut logits = Vec::with_capacity(group.len());
        for (e, x) in group.iter().enumerate() {
            let (f, jac) = model.jacobian(x, &post.mask)?;
            for a in 0..o {
                for (r, &v) in jac.row(a).iter().enumerate() {
                    rhs[(r, e * o + a)] = v;
                }
            }
            logits.push(f);
        }
        chol.forward_substitute(&mut rhs)?;
        let mut diag = vec![T::zero(); k];
        for r in 0..s {
            for (d, &v) in diag.iter_mut().zip(rhs.row(r)) {
                *d += v * v;
            }
        }
        for (e, f) in logits.iter().enumerate() {
            out.push(probit_softmax(f, &diag[e * o..(e + 1) * o]));
        }
    }
    Ok(out)
}

/// Gaussian predictive `N(f(x), Σ(x) + ε)` for a single-output model.
pub fn predictive_regress<T: Real, M: RepresentationModel<T>>(
    model: &M,
    x: &[T],
    post: &SubnetPosterior<T>,
    noise: T,
) -> Result<(T, T)> {
    if model.output_dim() != 1 {
        return Err(LaplaceError::DimensionMismatch { what: "regression outputs", expected: 1, got: model.output_dim() });
    }
    if noise < T::zero() {
        return Err(LaplaceError::InvalidOptions("noise variance must be non-negative".into()));
    }
    let (f, sigma) = predictive_covariance(model, x, post)?;
    Ok((f[0], sigma[(0, 0)] + noise))
}
