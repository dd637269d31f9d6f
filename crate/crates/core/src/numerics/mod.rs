//! Dense 64-bit tensors, elementary nonlinearities, a reproducible PRNG and a
//! central-difference gradient checker.

use crate::error::{Error, Result};

mod real;

pub use real::{DoubleDouble, Real};

/// Row-major dense tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} entries, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::shape("ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of rows of a matrix (first extent).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of columns of a matrix; 1 for vectors.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols().max(1))
    }

    /// `self · x` for a matrix `self`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.cols(), x.len());
        self.iter_rows().map(|row| dot(row, x)).collect()
    }

    /// `selfᵀ · y` for a matrix `self`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.rows(), y.len());
        let mut out = vec![0.0; self.cols()];
        for (row, &yi) in self.iter_rows().zip(y) {
            axpy(&mut out, yi, row);
        }
        out
    }

    /// `self += alpha · u vᵀ`.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(self.rows(), u.len());
        debug_assert_eq!(self.cols(), v.len());
        let c = self.cols();
        for (i, &ui) in u.iter().enumerate() {
            if ui != 0.0 {
                axpy(&mut self.data[i * c..(i + 1) * c], alpha * ui, v);
            }
        }
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        axpy(&mut self.data, alpha, &other.data);
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    /// Column means of a matrix.
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols()];
        for row in self.iter_rows() {
            axpy(&mut out, 1.0, row);
        }
        let n = self.rows().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`.
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Max-shifted softmax.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyVector);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// SplitMix64 stream with a Box–Muller Gaussian transform.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare: None,
        }
    }

    /// Independent stream derived from `seed` and a salt.
    pub fn derived(seed: u64, salt: u64) -> Self {
        let mut mixer = Rng::new(seed ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03));
        Rng::new(mixer.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn sample_gaussian(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
    if std.is_nan() || std < 0.0 || !std.is_finite() || !mean.is_finite() {
        return Err(Error::invalid(format!(
            "gaussian needs finite mean and std >= 0, got std = {std}"
        )));
    }
    let len = shape.iter().product();
    let data = (0..len).map(|_| mean + std * rng.gaussian()).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Worst entry of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients to central differences entry by entry.
///
/// `f` is evaluated at `params` with one entry nudged by `±h` at a time. The
/// objective may return a wider scalar than `f64`; the difference of the two
/// probes is taken in that type before rounding.
pub fn grad_check<R, F>(
    mut f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    R: Real,
    F: FnMut(&[Tensor]) -> R,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if params.len() != analytic.len() {
        return Err(Error::shape("one analytic gradient per parameter required"));
    }
    let mut probe = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (k, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[k].shape() {
            return Err(Error::shape(format!("gradient {k} shape differs from parameter")));
        }
        let mut worst = ParamError {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..params[k].len() {
            let w = params[k].data()[i];
            probe[k].data_mut()[i] = w + h;
            let plus = f(&probe);
            probe[k].data_mut()[i] = w - h;
            let minus = f(&probe);
            probe[k].data_mut()[i] = w;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteObjective);
            }
            let numeric = (plus - minus).to_f64() / (2.0 * h);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error || i == 0 {
                worst = ParamError {
                    max_rel_error: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        tolerance,
        pass: max_rel_error <= tolerance,
    })
}
