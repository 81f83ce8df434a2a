//! Residue geometry: pairwise distances, Gaussian basis kernel features,
//! the attention bias they induce, the structure positional encoding, and
//! coordinate noising for the denoising objective.
//!
//! Pair features are stored flattened as an `(N*N) x K` matrix whose row
//! `i * N + j` holds the kernel responses for residues `(i, j)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Provenance};
use crate::tensor::Mat;

/// Upper end of the range the kernel centers are initialized over, in ångström.
pub const KERNEL_RANGE: f64 = 20.0;

/// Alpha-carbon coordinates, one row per residue.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateSet {
    coords: Vec<[f64; 3]>,
}

impl CoordinateSet {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::rejected("coordinate set must hold at least one residue"));
        }
        if let Some(i) = coords.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::rejected(format!("non-finite coordinate at residue {i}")));
        }
        Ok(Self { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(
            self.coords.len(),
            3,
            self.coords.iter().flat_map(|c| c.iter().copied()).collect(),
        )
    }

    /// Applies `x -> R x + t` to every residue.
    pub fn transformed(&self, rotation: &[[f64; 3]; 3], translation: [f64; 3]) -> Self {
        let coords = self
            .coords
            .iter()
            .map(|c| {
                let mut out = [0.0; 3];
                for (r, o) in out.iter_mut().enumerate() {
                    *o = rotation[r][0] * c[0]
                        + rotation[r][1] * c[1]
                        + rotation[r][2] * c[2]
                        + translation[r];
                }
                out
            })
            .collect();
        Self { coords }
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            coords: perm.iter().map(|&i| self.coords[i]).collect(),
        }
    }
}

/// Sign applied to the Gaussian kernel response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelSign {
    /// Leading minus sign: every response is non-positive.
    #[default]
    Negative,
    /// Ordinary Gaussian density.
    Positive,
}

impl KernelSign {
    pub fn factor(self) -> f64 {
        match self {
            KernelSign::Negative => -1.0,
            KernelSign::Positive => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KernelSign::Negative => "negative",
            KernelSign::Positive => "positive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "negative" => Some(KernelSign::Negative),
            "positive" => Some(KernelSign::Positive),
            _ => None,
        }
    }
}

/// Kernel centers/scales plus the linear maps that turn pair features into
/// an attention bias (`w_a`, `w_b`) and a positional encoding (`w_c`).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    /// `1 x K` centers.
    pub mu: Mat,
    /// `1 x K` scales; only `|sigma|` is used.
    pub sigma: Mat,
    /// `K x K`.
    pub w_a: Mat,
    /// `K x 1`.
    pub w_b: Mat,
    /// `K x d`.
    pub w_c: Mat,
    pub omega: f64,
    pub activation: Activation,
    pub sign: KernelSign,
}

impl KernelBank {
    /// Centers evenly spaced on `[0, KERNEL_RANGE]`, scales equal to the
    /// spacing, Gaussian-initialized linear maps.
    pub fn init(k: usize, d: usize, rng: &mut impl rand::Rng) -> Self {
        let (mu, sigma) = kernel_grid(k);
        let std = 1.0 / (k as f64).sqrt();
        Self {
            mu,
            sigma,
            w_a: Mat::randn(k, k, std, rng),
            w_b: Mat::randn(k, 1, std, rng),
            w_c: Mat::randn(k, d, std, rng),
            omega: 1.0,
            activation: Activation::Gelu,
            sign: KernelSign::Negative,
        }
    }

    pub fn kernels(&self) -> usize {
        self.mu.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kernels();
        if k == 0 {
            return Err(Error::config("kernel bank needs at least one kernel"));
        }
        validate_sigma(&self.sigma)?;
        if self.sigma.shape() != (1, k)
            || self.w_a.shape() != (k, k)
            || self.w_b.shape() != (k, 1)
            || self.w_c.rows() != k
        {
            return Err(Error::shape(format!(
                "kernel bank shapes inconsistent with K={k}: sigma {:?}, w_a {:?}, w_b {:?}, w_c {:?}",
                self.sigma.shape(),
                self.w_a.shape(),
                self.w_b.shape(),
                self.w_c.shape()
            )));
        }
        Ok(())
    }

    /// Writes the learnable parts under `prefix` (`mu`, `sigma`, `w_a`, `w_b`, `w_c`).
    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str, provenance: Provenance) {
        store.insert(format!("{prefix}mu"), self.mu.clone(), provenance);
        store.insert(format!("{prefix}sigma"), self.sigma.clone(), provenance);
        store.insert(format!("{prefix}w_a"), self.w_a.clone(), provenance);
        store.insert(format!("{prefix}w_b"), self.w_b.clone(), provenance);
        store.insert(format!("{prefix}w_c"), self.w_c.clone(), provenance);
    }

    pub fn from_store(
        store: &ParamStore,
        prefix: &str,
        omega: f64,
        activation: Activation,
        sign: KernelSign,
    ) -> Result<Self> {
        let bank = Self {
            mu: store.get(&format!("{prefix}mu"))?.clone(),
            sigma: store.get(&format!("{prefix}sigma"))?.clone(),
            w_a: store.get(&format!("{prefix}w_a"))?.clone(),
            w_b: store.get(&format!("{prefix}w_b"))?.clone(),
            w_c: store.get(&format!("{prefix}w_c"))?.clone(),
            omega,
            activation,
            sign,
        };
        bank.validate()?;
        Ok(bank)
    }
}

/// Evenly spaced centers on `[0, KERNEL_RANGE]` with scale equal to the spacing.
pub fn kernel_grid(k: usize) -> (Mat, Mat) {
    let spacing = if k > 1 {
        KERNEL_RANGE / (k - 1) as f64
    } else {
        KERNEL_RANGE
    };
    let mu = Mat::from_vec(1, k, (0..k).map(|i| i as f64 * spacing).collect());
    let sigma = Mat::filled(1, k, spacing);
    (mu, sigma)
}

fn validate_sigma(sigma: &Mat) -> Result<()> {
    if let Some(k) = sigma.data().iter().position(|s| *s == 0.0 || !s.is_finite()) {
        return Err(Error::config(format!("kernel {k} has zero or non-finite scale")));
    }
    Ok(())
}

/// Gaussian basis responses for every residue pair, `(N*N) x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeatures {
    pub n: usize,
    pub psi: Mat,
}

impl PairFeatures {
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.psi.get(i * self.n + j, k)
    }

    pub fn kernels(&self) -> usize {
        self.psi.cols()
    }
}

/// Pair features together with the bias and encoding derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureFeatures {
    pub psi: PairFeatures,
    /// `N x N` attention bias.
    pub delta: Mat,
    /// `N x d` positional encoding term.
    pub pe: Mat,
}

/// Coordinates after noising, with the noise that was drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub noised: CoordinateSet,
    /// `N x 3` standard-normal draws.
    pub noise: Mat,
    pub alpha: f64,
}

/// Euclidean distance matrix; symmetric with a zero diagonal.
pub fn pairwise_distances(coords: &CoordinateSet) -> Mat {
    let pts = coords.points();
    let n = pts.len();
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = ((pts[i][0] - pts[j][0]).powi(2)
                + (pts[i][1] - pts[j][1]).powi(2)
                + (pts[i][2] - pts[j][2]).powi(2))
            .sqrt();
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

pub fn gbk_features(distances: &Mat, bank: &KernelBank) -> Result<PairFeatures> {
    validate_sigma(&bank.sigma)?;
    let mut g = Graph::new();
    let mu = g.constant(bank.mu.clone());
    let sigma = g.constant(bank.sigma.clone());
    let psi = gbk_var(&mut g, distances, mu, sigma, bank.sign)?;
    Ok(PairFeatures {
        n: distances.rows(),
        psi: g.value(psi).clone(),
    })
}

pub fn structure_bias(psi: &PairFeatures, bank: &KernelBank) -> Result<Mat> {
    let mut g = Graph::new();
    let vars = BankVars::constants(&mut g, bank);
    let p = g.constant(psi.psi.clone());
    let delta = structure_bias_var(&mut g, p, psi.n, &vars, bank.activation)?;
    Ok(g.value(delta).clone())
}

pub fn structure_pos_encoding(psi: &PairFeatures, bank: &KernelBank) -> Result<Mat> {
    let mut g = Graph::new();
    let vars = BankVars::constants(&mut g, bank);
    let p = g.constant(psi.psi.clone());
    let pe = structure_pe_var(&mut g, p, psi.n, &vars, bank.omega)?;
    Ok(g.value(pe).clone())
}

/// Distances, pair features, bias and positional encoding in one pass.
pub fn structure_features(coords: &CoordinateSet, bank: &KernelBank) -> Result<StructureFeatures> {
    bank.validate()?;
    let psi = gbk_features(&pairwise_distances(coords), bank)?;
    let delta = structure_bias(&psi, bank)?;
    let pe = structure_pos_encoding(&psi, bank)?;
    Ok(StructureFeatures { psi, delta, pe })
}

/// Draws `N x 3` standard-normal noise from a generator seeded with `seed`
/// and returns `coords + alpha * noise`.
pub fn apply_noise(coords: &CoordinateSet, alpha: f64, seed: u64) -> Result<NoiseSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_noise_with(coords, alpha, &mut rng)
}

pub fn apply_noise_with(
    coords: &CoordinateSet,
    alpha: f64,
    rng: &mut impl rand::Rng,
) -> Result<NoiseSample> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::config(format!("noise scale must be finite and >= 0, got {alpha}")));
    }
    let n = coords.len();
    let mut noise = Mat::zeros(n, 3);
    let mut noised = Vec::with_capacity(n);
    for (i, c) in coords.points().iter().enumerate() {
        let mut p = [0.0; 3];
        for ax in 0..3 {
            let z: f64 = StandardNormal.sample(rng);
            noise.set(i, ax, z);
            p[ax] = c[ax] + alpha * z;
        }
        noised.push(p);
    }
    Ok(NoiseSample {
        noised: CoordinateSet::new(noised)?,
        noise,
        alpha,
    })
}

/// Kernel bank parameters bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct BankVars {
    pub mu: Var,
    pub sigma: Var,
    pub w_a: Var,
    pub w_b: Var,
    pub w_c: Var,
}

impl BankVars {
    pub fn constants(g: &mut Graph, bank: &KernelBank) -> Self {
        Self {
            mu: g.constant(bank.mu.clone()),
            sigma: g.constant(bank.sigma.clone()),
            w_a: g.constant(bank.w_a.clone()),
            w_b: g.constant(bank.w_b.clone()),
            w_c: g.constant(bank.w_c.clone()),
        }
    }

    pub fn from_store(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            mu: store.var(g, &format!("{prefix}mu"))?,
            sigma: store.var(g, &format!("{prefix}sigma"))?,
            w_a: store.var(g, &format!("{prefix}w_a"))?,
            w_b: store.var(g, &format!("{prefix}w_b"))?,
            w_c: store.var(g, &format!("{prefix}w_c"))?,
        })
    }
}

/// Graph form of [`gbk_features`]: `(N*N) x K` responses of the distance
/// matrix `distances`.
pub fn gbk_var(
    g: &mut Graph,
    distances: &Mat,
    mu: Var,
    sigma: Var,
    sign: KernelSign,
) -> Result<Var> {
    validate_sigma(g.value(sigma))?;
    if distances.rows() != distances.cols() {
        return Err(Error::shape("distance matrix must be square"));
    }
    Ok(g.gaussian_basis(distances.data(), mu, sigma, sign.factor()))
}

/// `phi(psi W_a) W_b`, reshaped to `N x N`.
pub fn structure_bias_var(
    g: &mut Graph,
    psi: Var,
    n: usize,
    bank: &BankVars,
    activation: Activation,
) -> Result<Var> {
    let k = g.value(psi).cols();
    if g.value(bank.w_a).shape() != (k, k) || g.value(bank.w_b).shape() != (k, 1) {
        return Err(Error::shape(format!(
            "pair features have K={k} but W_a is {:?} and W_b is {:?}",
            g.value(bank.w_a).shape(),
            g.value(bank.w_b).shape()
        )));
    }
    if g.value(psi).rows() != n * n {
        return Err(Error::shape("pair feature rows must equal N*N"));
    }
    let h = g.matmul(psi, bank.w_a);
    let h = g.activation(h, activation);
    let d = g.matmul(h, bank.w_b);
    Ok(g.reshape(d, n, n))
}

/// `omega * (sum_j psi_(i,j)) W_c`, `N x d`.
pub fn structure_pe_var(
    g: &mut Graph,
    psi: Var,
    n: usize,
    bank: &BankVars,
    omega: f64,
) -> Result<Var> {
    let k = g.value(psi).cols();
    if g.value(bank.w_c).rows() != k {
        return Err(Error::shape(format!(
            "pair features have K={k} but W_c has {} rows",
            g.value(bank.w_c).rows()
        )));
    }
    let rows = g.block_row_sum(psi, n);
    let pe = g.matmul(rows, bank.w_c);
    Ok(g.scale(pe, omega))
}
