//! Truncated three-mode Fock-space engine.
//!
//! The three modes are the SPDC signal (`s`), the idler which doubles as the
//! converter input (`i`), and the upconverted output (`o`). Every mode is
//! truncated at `n_max` photons, giving a `(n_max + 1)³` dimensional basis
//! enumerated lexicographically in `(n_s, n_i, n_o)`:
//!
//! ```text
//! index(n_s, n_i, n_o) = (n_s·(n_max+1) + n_i)·(n_max+1) + n_o
//! ```
//!
//! Units follow ħ = 1, so couplings are angular rates and `κ·A_p·t` is a
//! dimensionless rotation angle.
//!
//! Sign conventions (pinned by tests):
//!
//! - `H_QFC  =  i·κ·A_p·â_i â_o† + h.c.`
//! - `H_SPDC = −i·γ·A_p·â_s† â_i† + h.c.`, so `⟨1,1,0|H_SPDC|0,0,0⟩ = −i·γ·A_p`
//! - evolution operators are `U = exp(+i·t·H)`.
//!
//! With these choices the low-gain pair amplitude `⟨1,1,0|U_SPDC|0,0,0⟩` is
//! `+γ·A_p·t` and the converted amplitude `⟨1,0,1|U_QFC U_SPDC|0,0,0⟩` is
//! `−γ·κ·A_p²·t²` to leading order.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};

/// Default per-mode photon-number cutoff.
pub const DEFAULT_N_MAX: usize = 3;

/// Tolerance used for the Hermiticity check in [`evolve`].
const HERMITIAN_TOL: f64 = 1e-12;

/// Mean photon numbers below this are treated as zero in correlation ratios.
const MIN_MEAN_PHOTONS: f64 = 1e-15;

/// Population at the cutoff above which observables are flagged as
/// truncation limited. Below it, observables at `n_max = 3` move by less
/// than 1e-6 when the cutoff is raised.
const TRUNCATION_WEIGHT_LIMIT: f64 = 2e-10;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Signal,
    Idler,
    Output,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Signal, Mode::Idler, Mode::Output];

    fn slot(self) -> usize {
        match self {
            Mode::Signal => 0,
            Mode::Idler => 1,
            Mode::Output => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::Signal => "s",
            Mode::Idler => "i",
            Mode::Output => "o",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" | "signal" => Ok(Mode::Signal),
            "i" | "idler" | "input" => Ok(Mode::Idler),
            "o" | "output" => Ok(Mode::Output),
            other => Err(Error::domain(format!("unknown mode label {other:?}"))),
        }
    }
}

/// Occupation numbers `(n_s, n_i, n_o)` of one basis state.
pub type Occupation = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FockBasis {
    n_max: usize,
}

impl FockBasis {
    pub fn new(n_max: usize) -> Result<Self> {
        if n_max == 0 {
            return Err(Error::domain("n_max must be at least 1"));
        }
        Ok(Self { n_max })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn dim(&self) -> usize {
        (self.n_max + 1).pow(3)
    }

    pub fn index(&self, occ: Occupation) -> Option<usize> {
        if occ.iter().any(|&n| n > self.n_max) {
            return None;
        }
        let d = self.n_max + 1;
        Some((occ[0] * d + occ[1]) * d + occ[2])
    }

    pub fn occupation(&self, index: usize) -> Occupation {
        let d = self.n_max + 1;
        [index / (d * d), (index / d) % d, index % d]
    }

    pub fn states(&self) -> impl Iterator<Item = (usize, Occupation)> + '_ {
        (0..self.dim()).map(move |k| (k, self.occupation(k)))
    }
}

impl Default for FockBasis {
    fn default() -> Self {
        Self { n_max: DEFAULT_N_MAX }
    }
}

/// Coupling constants of the two nonlinear processes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingParams {
    /// QFC coupling κ (s⁻¹ per unit pump amplitude).
    pub kappa: f64,
    /// SPDC coupling γ (s⁻¹ per unit pump amplitude).
    pub gamma: f64,
    /// Classical pump amplitude A_p; pump power ∝ A_p².
    pub pump_amplitude: f64,
    /// Interaction time t (s).
    pub interaction_time: f64,
}

impl CouplingParams {
    pub fn new(kappa: f64, gamma: f64, pump_amplitude: f64, interaction_time: f64) -> Result<Self> {
        for (name, v) in [
            ("kappa", kappa),
            ("gamma", gamma),
            ("interaction_time", interaction_time),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !pump_amplitude.is_finite() {
            return Err(Error::domain("pump_amplitude must be finite"));
        }
        Ok(Self {
            kappa,
            gamma,
            pump_amplitude,
            interaction_time,
        })
    }

    /// Conversion rotation angle κ·A_p·t.
    pub fn conversion_angle(&self) -> f64 {
        self.kappa * self.pump_amplitude * self.interaction_time
    }

    /// Pair-generation squeezing parameter γ·A_p·t.
    pub fn pair_gain(&self) -> f64 {
        self.gamma * self.pump_amplitude * self.interaction_time
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FockOperator {
    basis: FockBasis,
    matrix: DMatrix<Complex64>,
}

impl FockOperator {
    pub fn zeros(basis: FockBasis) -> Self {
        let d = basis.dim();
        Self {
            basis,
            matrix: DMatrix::zeros(d, d),
        }
    }

    pub fn identity(basis: FockBasis) -> Self {
        let d = basis.dim();
        Self {
            basis,
            matrix: DMatrix::identity(d, d),
        }
    }

    pub fn from_matrix(basis: FockBasis, matrix: DMatrix<Complex64>) -> Result<Self> {
        let d = basis.dim();
        if matrix.nrows() != d || matrix.ncols() != d {
            return Err(Error::domain(format!(
                "matrix is {}x{}, basis dimension is {d}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(Self { basis, matrix })
    }

    pub fn basis(&self) -> FockBasis {
        self.basis
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    /// `⟨row|A|col⟩`.
    pub fn element(&self, row: Occupation, col: Occupation) -> Complex64 {
        match (self.basis.index(row), self.basis.index(col)) {
            (Some(r), Some(c)) => self.matrix[(r, c)],
            _ => ZERO,
        }
    }

    pub fn adjoint(&self) -> Self {
        Self {
            basis: self.basis,
            matrix: self.matrix.adjoint(),
        }
    }

    pub fn mul(&self, other: &FockOperator) -> Self {
        Self {
            basis: self.basis,
            matrix: &self.matrix * &other.matrix,
        }
    }

    pub fn add(&self, other: &FockOperator) -> Self {
        Self {
            basis: self.basis,
            matrix: &self.matrix + &other.matrix,
        }
    }

    pub fn scale(&self, factor: Complex64) -> Self {
        Self {
            basis: self.basis,
            matrix: &self.matrix * factor,
        }
    }

    /// Largest elementwise modulus.
    pub fn max_abs(&self) -> f64 {
        self.matrix.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `‖A − A†‖_max`.
    pub fn hermiticity_error(&self) -> f64 {
        let diff = &self.matrix - self.matrix.adjoint();
        diff.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `‖U†U − I‖_max`.
    pub fn unitarity_error(&self) -> f64 {
        let d = self.basis.dim();
        let prod = self.matrix.adjoint() * &self.matrix - DMatrix::<Complex64>::identity(d, d);
        prod.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn apply(&self, state: &FockState) -> FockState {
        FockState {
            basis: self.basis,
            amplitudes: &self.matrix * &state.amplitudes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FockState {
    basis: FockBasis,
    amplitudes: DVector<Complex64>,
}

impl FockState {
    pub fn vacuum(basis: FockBasis) -> Self {
        Self::number(basis, [0, 0, 0]).expect("vacuum is always in the basis")
    }

    /// A single number state `|n_s, n_i, n_o⟩`.
    pub fn number(basis: FockBasis, occ: Occupation) -> Result<Self> {
        let k = basis
            .index(occ)
            .ok_or_else(|| Error::domain(format!("occupation {occ:?} exceeds n_max = {}", basis.n_max)))?;
        let mut amplitudes = DVector::zeros(basis.dim());
        amplitudes[k] = Complex64::new(1.0, 0.0);
        Ok(Self { basis, amplitudes })
    }

    /// Normalises the supplied amplitudes; fails for a zero vector.
    pub fn from_amplitudes(basis: FockBasis, amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.len() != basis.dim() {
            return Err(Error::domain(format!(
                "expected {} amplitudes, got {}",
                basis.dim(),
                amplitudes.len()
            )));
        }
        let v = DVector::from_vec(amplitudes);
        let norm = v.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::domain("state vector has zero or non-finite norm"));
        }
        Ok(Self {
            basis,
            amplitudes: v / Complex64::new(norm, 0.0),
        })
    }

    pub fn basis(&self) -> FockBasis {
        self.basis
    }

    pub fn amplitudes(&self) -> &DVector<Complex64> {
        &self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.norm()
    }

    pub fn amplitude(&self, occ: Occupation) -> Complex64 {
        self.basis.index(occ).map_or(ZERO, |k| self.amplitudes[k])
    }

    pub fn population(&self, occ: Occupation) -> f64 {
        self.amplitude(occ).norm_sqr()
    }

    /// Total population in basis states with any mode at the cutoff.
    pub fn cutoff_weight(&self) -> f64 {
        let n_max = self.basis.n_max;
        self.basis
            .states()
            .filter(|(_, occ)| occ.contains(&n_max))
            .map(|(k, _)| self.amplitudes[k].norm_sqr())
            .sum()
    }

    /// `⟨f(n_s, n_i, n_o)⟩` for a function diagonal in the number basis.
    pub fn expect_diagonal(&self, f: impl Fn(Occupation) -> f64) -> f64 {
        self.basis
            .states()
            .map(|(k, occ)| self.amplitudes[k].norm_sqr() * f(occ))
            .sum()
    }

    pub fn mean_photons(&self, mode: Mode) -> f64 {
        self.expect_diagonal(|occ| occ[mode.slot()] as f64)
    }
}

/// Annihilation operator of one mode, `⟨…n−1…|â|…n…⟩ = √n`.
pub fn build_annihilator(basis: FockBasis, mode: Mode) -> FockOperator {
    let mut op = FockOperator::zeros(basis);
    let slot = mode.slot();
    for (col, occ) in basis.states() {
        let n = occ[slot];
        if n == 0 {
            continue;
        }
        let mut lowered = occ;
        lowered[slot] -= 1;
        let row = basis.index(lowered).expect("lowered state stays in basis");
        op.matrix[(row, col)] = Complex64::new((n as f64).sqrt(), 0.0);
    }
    op
}

/// Number operator `â†â` of one mode.
pub fn build_number(basis: FockBasis, mode: Mode) -> FockOperator {
    let a = build_annihilator(basis, mode);
    a.adjoint().mul(&a)
}

/// `H_QFC = i·κ·A_p·â_i â_o† + h.c.`
pub fn build_qfc_hamiltonian(basis: FockBasis, params: &CouplingParams) -> FockOperator {
    let coupling = I * (params.kappa * params.pump_amplitude);
    let a_i = build_annihilator(basis, Mode::Idler);
    let a_o = build_annihilator(basis, Mode::Output);
    let term = a_i.mul(&a_o.adjoint()).scale(coupling);
    term.add(&term.adjoint())
}

/// `H_SPDC = −i·γ·A_p·â_s† â_i† + h.c.`
pub fn build_spdc_hamiltonian(basis: FockBasis, params: &CouplingParams) -> FockOperator {
    let coupling = -I * (params.gamma * params.pump_amplitude);
    let a_s = build_annihilator(basis, Mode::Signal);
    let a_i = build_annihilator(basis, Mode::Idler);
    let term = a_s.adjoint().mul(&a_i.adjoint()).scale(coupling);
    term.add(&term.adjoint())
}

/// `exp(i·t·H)` for Hermitian `H`, via its eigendecomposition.
///
/// Fails with a convergence error if the reconstructed operator misses
/// unitarity by more than `tolerance`.
pub fn unitary(hamiltonian: &FockOperator, time: f64, tolerance: f64) -> Result<FockOperator> {
    if !(tolerance > 0.0) {
        return Err(Error::domain("tolerance must be > 0"));
    }
    if !time.is_finite() {
        return Err(Error::domain("time must be finite"));
    }
    let scale = hamiltonian.max_abs().max(1.0);
    let herm_err = hamiltonian.hermiticity_error();
    if herm_err > HERMITIAN_TOL * scale {
        return Err(Error::domain(format!(
            "hamiltonian is not Hermitian (‖H − H†‖_max = {herm_err:e})"
        )));
    }
    let basis = hamiltonian.basis;
    if time == 0.0 || hamiltonian.max_abs() == 0.0 {
        return Ok(FockOperator::identity(basis));
    }

    // Symmetrise to remove round-off before the Hermitian eigensolver.
    let h = (&hamiltonian.matrix + hamiltonian.matrix.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = h.symmetric_eigen();
    let phases = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&e| (I * (time * e)).exp()),
    );
    let v = &eig.eigenvectors;
    let u = v * DMatrix::from_diagonal(&phases) * v.adjoint();
    let op = FockOperator { basis, matrix: u };
    let err = op.unitarity_error();
    if err >= tolerance {
        return Err(Error::Convergence {
            what: "matrix exponential lost unitarity".into(),
            achieved: err,
            requested: tolerance,
        });
    }
    Ok(op)
}

/// Returns `exp(i·t·H)·state`, renormalised against round-off.
pub fn evolve(state: &FockState, hamiltonian: &FockOperator, time: f64, tolerance: f64) -> Result<FockState> {
    if state.basis != hamiltonian.basis {
        return Err(Error::domain("state and hamiltonian live in different bases"));
    }
    if (state.norm() - 1.0).abs() > 1e-10 {
        return Err(Error::domain(format!("input state is not normalised (norm {})", state.norm())));
    }
    let u = unitary(hamiltonian, time, tolerance)?;
    let mut out = u.apply(state);
    let norm = out.norm();
    out.amplitudes /= Complex64::new(norm, 0.0);
    Ok(out)
}

/// How the two processes are combined in [`cascaded_evolution_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvolutionOrder {
    /// `U_QFC(t)·U_SPDC(t)`: pair generation followed by conversion.
    #[default]
    Sequential,
    /// `exp(i·t·(H_QFC + H_SPDC))`, for sensitivity studies.
    Joint,
}

pub const DEFAULT_TOLERANCE: f64 = 1e-10;

/// `U_QFC·U_SPDC|0,0,0⟩`.
pub fn cascaded_evolution(basis: FockBasis, params: &CouplingParams) -> Result<FockState> {
    cascaded_evolution_with(basis, params, EvolutionOrder::Sequential)
}

pub fn cascaded_evolution_with(
    basis: FockBasis,
    params: &CouplingParams,
    order: EvolutionOrder,
) -> Result<FockState> {
    let t = params.interaction_time;
    let h_qfc = build_qfc_hamiltonian(basis, params);
    let h_spdc = build_spdc_hamiltonian(basis, params);
    let vacuum = FockState::vacuum(basis);
    match order {
        EvolutionOrder::Sequential => {
            let pairs = evolve(&vacuum, &h_spdc, t, DEFAULT_TOLERANCE)?;
            evolve(&pairs, &h_qfc, t, DEFAULT_TOLERANCE)
        }
        EvolutionOrder::Joint => evolve(&vacuum, &h_qfc.add(&h_spdc), t, DEFAULT_TOLERANCE),
    }
}

/// A correlation value, or an explicit marker that its denominator vanished.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", content = "value", rename_all = "lowercase")]
pub enum Correlation {
    Defined(f64),
    Undefined,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Defined(v) => Some(v),
            Correlation::Undefined => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Correlation::Defined(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FockCorrelations {
    pub basis_dim: usize,
    pub mean_photons: [f64; 3],
    /// g²_{s,i}
    pub cross_si: Correlation,
    /// g²_{s,o}
    pub cross_so: Correlation,
    /// g²_a(0) for signal, idler, output.
    pub auto: [Correlation; 3],
    pub cutoff_weight: f64,
    pub truncation_limited: bool,
}

/// One exported observable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservableRecord {
    pub observable: String,
    pub value: Option<f64>,
    pub basis_dim: usize,
    pub truncation_limited: bool,
}

impl FockCorrelations {
    pub fn cross(&self, a: Mode, b: Mode) -> Option<Correlation> {
        match (a, b) {
            (Mode::Signal, Mode::Idler) | (Mode::Idler, Mode::Signal) => Some(self.cross_si),
            (Mode::Signal, Mode::Output) | (Mode::Output, Mode::Signal) => Some(self.cross_so),
            _ => None,
        }
    }

    pub fn records(&self) -> Vec<ObservableRecord> {
        let rec = |name: String, value: Option<f64>| ObservableRecord {
            observable: name,
            value,
            basis_dim: self.basis_dim,
            truncation_limited: self.truncation_limited,
        };
        let mut out = Vec::new();
        for m in Mode::ALL {
            out.push(rec(format!("n_{m}"), Some(self.mean_photons[m.slot()])));
        }
        out.push(rec("g2_si".into(), self.cross_si.value()));
        out.push(rec("g2_so".into(), self.cross_so.value()));
        for m in Mode::ALL {
            out.push(rec(format!("g2_{m}{m}(0)"), self.auto[m.slot()].value()));
        }
        out
    }
}

/// Photon-number correlations of a pure state.
///
/// `g²_{a,b} = ⟨n̂_a n̂_b⟩/(⟨n̂_a⟩⟨n̂_b⟩)` and
/// `g²_a(0) = ⟨n̂_a(n̂_a − 1)⟩/⟨n̂_a⟩²`.
pub fn correlation_observables(state: &FockState) -> FockCorrelations {
    let mean = Mode::ALL.map(|m| state.mean_photons(m));
    let cross = |a: Mode, b: Mode| {
        let (na, nb) = (mean[a.slot()], mean[b.slot()]);
        if na < MIN_MEAN_PHOTONS || nb < MIN_MEAN_PHOTONS {
            return Correlation::Undefined;
        }
        let nanb = state.expect_diagonal(|occ| (occ[a.slot()] * occ[b.slot()]) as f64);
        Correlation::Defined(nanb / (na * nb))
    };
    let auto = Mode::ALL.map(|m| {
        let n = mean[m.slot()];
        if n < MIN_MEAN_PHOTONS {
            return Correlation::Undefined;
        }
        let fact = state.expect_diagonal(|occ| {
            let k = occ[m.slot()] as f64;
            k * (k - 1.0)
        });
        Correlation::Defined(fact / (n * n))
    });
    let cutoff_weight = state.cutoff_weight();
    FockCorrelations {
        basis_dim: state.basis.dim(),
        mean_photons: mean,
        cross_si: cross(Mode::Signal, Mode::Idler),
        cross_so: cross(Mode::Signal, Mode::Output),
        auto,
        cutoff_weight,
        truncation_limited: cutoff_weight > TRUNCATION_WEIGHT_LIMIT,
    }
}

/// Largest change of any observable between cutoffs `n_max` and `n_max + 1`.
///
/// Mean photon numbers are compared absolutely, correlation functions
/// relative to their value.
pub fn truncation_sensitivity(n_max: usize, params: &CouplingParams) -> Result<f64> {
    let lo = correlation_observables(&cascaded_evolution(FockBasis::new(n_max)?, params)?);
    let hi = correlation_observables(&cascaded_evolution(FockBasis::new(n_max + 1)?, params)?);
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        worst = worst.max((lo.mean_photons[k] - hi.mean_photons[k]).abs());
    }
    let mut cmp = |a: Correlation, b: Correlation| match (a, b) {
        (Correlation::Defined(x), Correlation::Defined(y)) => {
            worst = worst.max((x - y).abs() / y.abs().max(1.0));
        }
        (Correlation::Undefined, Correlation::Undefined) => {}
        _ => worst = f64::INFINITY,
    };
    cmp(lo.cross_si, hi.cross_si);
    cmp(lo.cross_so, hi.cross_so);
    for k in 0..3 {
        cmp(lo.auto[k], hi.auto[k]);
    }
    Ok(worst)
}
