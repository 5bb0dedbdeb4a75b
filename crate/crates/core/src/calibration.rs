//! Device configuration files and the fit that produces them.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::spectral::{
    conversion_efficiency, noise_bandwidths, ConverterModel, LossBudget, SpectralFilter,
};

pub const SCHEMA_VERSION: u32 = 1;

const BUNDLED: &str = include_str!("../data/device_calibration.toml");

/// Filters available on the bench.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPresets {
    /// Narrow bandpass in front of the UV detector.
    pub uv_bandpass: SpectralFilter,
    pub etalon: SpectralFilter,
    /// Absorption line of the target ion, used as a reference filter.
    pub ion_line: SpectralFilter,
    /// Bandpass on the SPDC signal arm for low-pump correlation runs.
    pub signal_bandpass: SpectralFilter,
    /// Volume Bragg grating on the signal arm.
    pub vbg: SpectralFilter,
    pub spectrometer: SpectralFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub schema_version: u32,
    pub model: ConverterModel,
    pub losses: LossBudget,
    pub filters: FilterPresets,
}

impl DeviceConfig {
    /// The bundled calibration of the 1311 nm → 369.5 nm converter.
    pub fn bundled() -> Self {
        Self::from_toml(BUNDLED).expect("bundled calibration parses")
    }

    pub fn bundled_toml() -> &'static str {
        BUNDLED
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(format!("invalid device config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("cannot serialise config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.losses
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        for f in [
            &self.filters.uv_bandpass,
            &self.filters.etalon,
            &self.filters.ion_line,
            &self.filters.signal_bandpass,
            &self.filters.vbg,
            &self.filters.spectrometer,
        ] {
            f.validate().map_err(|e| Error::config(e.to_string()))?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML serialisation.
    pub fn hash(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// UV path with only the bandpass.
    pub fn unfiltered_uv(&self) -> Vec<SpectralFilter> {
        vec![self.filters.uv_bandpass]
    }

    /// UV path with bandpass and etalon.
    pub fn etalon_uv(&self) -> Vec<SpectralFilter> {
        vec![self.filters.uv_bandpass, self.filters.etalon]
    }

    /// Etalon-filtered path further restricted to the ion's linewidth.
    pub fn ion_line_uv(&self) -> Vec<SpectralFilter> {
        vec![self.filters.uv_bandpass, self.filters.etalon, self.filters.ion_line]
    }
}

/// Target values the calibration reproduces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationAnchors {
    pub anchor_pump_mw: f64,
    pub eta_internal: f64,
    pub eta_external: f64,
    /// Pump power at which saturation turns the efficiency over.
    pub turnover_mw: f64,
    /// Optical noise within the ion linewidth at `anchor_pump_mw`.
    pub ion_line_noise_hz: f64,
    /// Cascaded-to-luminescence noise ratio with only the bandpass.
    pub cascade_ratio_pump_mw: f64,
    pub cascade_ratio: f64,
    /// Signal-mode luminescence relative to the pair spectral density.
    pub signal_luminescence_fraction: f64,
}

impl Default for CalibrationAnchors {
    fn default() -> Self {
        Self {
            anchor_pump_mw: 200.0,
            eta_internal: 0.105,
            eta_external: 0.055,
            turnover_mw: 600.0,
            ion_line_noise_hz: 1.3,
            cascade_ratio_pump_mw: 25.0,
            cascade_ratio: 3.0,
            signal_luminescence_fraction: 0.05,
        }
    }
}

/// Summary of a calibration fit.
#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub anchors: CalibrationAnchors,
    pub eta_nor: f64,
    pub uv_absorption_coeff: f64,
    pub mode_matching: f64,
    pub pair_rate_density: f64,
    pub uv_luminescence_density: f64,
    pub reproduced_eta_internal: f64,
    pub reproduced_ion_line_noise_hz: f64,
}

/// Refits the efficiency and noise coefficients of `base` to `anchors`,
/// leaving geometry, filters and loss factors other than mode matching
/// untouched.
pub fn calibrate(base: &DeviceConfig, anchors: &CalibrationAnchors) -> Result<(DeviceConfig, CalibrationReport)> {
    let a = anchors;
    for (name, v) in [
        ("anchor_pump_mw", a.anchor_pump_mw),
        ("turnover_mw", a.turnover_mw),
        ("ion_line_noise_hz", a.ion_line_noise_hz),
        ("cascade_ratio_pump_mw", a.cascade_ratio_pump_mw),
        ("cascade_ratio", a.cascade_ratio),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::config(format!("anchor {name} must be positive, got {v}")));
        }
    }
    if !(a.eta_internal > 0.0 && a.eta_internal < 1.0 && a.eta_external > 0.0 && a.eta_external <= a.eta_internal) {
        return Err(Error::config("need 0 < eta_external <= eta_internal < 1"));
    }
    let mut cfg = base.clone();
    let m = &mut cfg.model;

    // d/dP [P·exp(−cP)] vanishes at P = 1/c
    m.uv_absorption_coeff = 1e3 / a.turnover_mw;
    let p_eff_w = m.effective_pump_mw(a.anchor_pump_mw) * 1e-3;
    let angle = a.eta_internal.sqrt().asin();
    m.eta_nor = (angle / m.length_mm).powi(2) / p_eff_w;
    cfg.losses.mode_matching = a.eta_external / a.eta_internal;

    // Noise densities scale jointly; fix their ratio first, then the scale.
    let unfiltered = noise_bandwidths(&cfg.unfiltered_uv(), &cfg.model);
    let ion = noise_bandwidths(&cfg.ion_line_uv(), &cfg.model);
    let m = &mut cfg.model;
    let t = m.uv_path_transmission;
    let k = m.small_signal_efficiency(1.0);
    // ρ·k·t·P²·B_pm = ratio·d·t·P·B_flat  with d = 1
    let p = a.cascade_ratio_pump_mw;
    let rho_per_d = a.cascade_ratio * unfiltered.flat_ghz / (k * p * unfiltered.phasematched_ghz);
    let pa = a.anchor_pump_mw;
    let per_d = t * pa * ion.flat_ghz + rho_per_d * k * t * pa * pa * ion.phasematched_ghz * m.etalon_cascade_acceptance;
    let d = a.ion_line_noise_hz / per_d;
    m.uv_luminescence_density = d;
    m.pair_rate_density = rho_per_d * d;
    m.signal_luminescence_density = a.signal_luminescence_fraction * m.pair_rate_density;
    cfg.validate()?;

    let reproduced_eta = conversion_efficiency(a.anchor_pump_mw, &cfg.model, true, &cfg.losses)?;
    let reproduced_noise = crate::spectral::noise_components(a.anchor_pump_mw, &cfg.ion_line_uv(), &cfg.model)?.optical();
    if (reproduced_eta - a.eta_internal).abs() > 1e-9 || (reproduced_noise / a.ion_line_noise_hz - 1.0).abs() > 1e-6 {
        return Err(Error::Convergence {
            what: "calibration".into(),
            achieved: reproduced_noise,
            requested: a.ion_line_noise_hz,
        });
    }
    let report = CalibrationReport {
        anchors: *a,
        eta_nor: cfg.model.eta_nor,
        uv_absorption_coeff: cfg.model.uv_absorption_coeff,
        mode_matching: cfg.losses.mode_matching,
        pair_rate_density: cfg.model.pair_rate_density,
        uv_luminescence_density: cfg.model.uv_luminescence_density,
        reproduced_eta_internal: reproduced_eta,
        reproduced_ion_line_noise_hz: reproduced_noise,
    };
    Ok((cfg, report))
}

/// Quantities a calibration can be anchored to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "observable", rename_all = "snake_case")]
pub enum Observable {
    EtaInternal { pump_mw: f64 },
    EtaExternal { pump_mw: f64 },
    /// Total noise rate at the UV detector with the given filter path.
    NoiseRate { pump_mw: f64, path: UvPath },
    /// Noise rate excluding dark counts.
    OpticalNoise { pump_mw: f64, path: UvPath },
    EtalonTransmission,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UvPath {
    Unfiltered,
    Etalon,
    IonLine,
}

impl DeviceConfig {
    pub fn uv_path(&self, path: UvPath) -> Vec<SpectralFilter> {
        match path {
            UvPath::Unfiltered => self.unfiltered_uv(),
            UvPath::Etalon => self.etalon_uv(),
            UvPath::IonLine => self.ion_line_uv(),
        }
    }
}

impl Observable {
    pub fn evaluate(&self, cfg: &DeviceConfig) -> Result<f64> {
        match *self {
            Observable::EtaInternal { pump_mw } => conversion_efficiency(pump_mw, &cfg.model, true, &cfg.losses),
            Observable::EtaExternal { pump_mw } => conversion_efficiency(pump_mw, &cfg.model, false, &cfg.losses),
            Observable::NoiseRate { pump_mw, path } => {
                crate::spectral::noise_rate(pump_mw, &cfg.uv_path(path), &cfg.model)
            }
            Observable::OpticalNoise { pump_mw, path } => {
                Ok(crate::spectral::noise_components(pump_mw, &cfg.uv_path(path), &cfg.model)?.optical())
            }
            Observable::EtalonTransmission => Ok(cfg.losses.etalon_transmission),
        }
    }
}

/// Model coefficients a fit may adjust.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeParam {
    EtaNor,
    UvAbsorptionCoeff,
    ModeMatching,
    PairRateDensity,
    UvLuminescenceDensity,
    DarkCountRate,
    EtalonTransmission,
}

impl FreeParam {
    fn get(self, cfg: &DeviceConfig) -> f64 {
        match self {
            FreeParam::EtaNor => cfg.model.eta_nor,
            FreeParam::UvAbsorptionCoeff => cfg.model.uv_absorption_coeff,
            FreeParam::ModeMatching => cfg.losses.mode_matching,
            FreeParam::PairRateDensity => cfg.model.pair_rate_density,
            FreeParam::UvLuminescenceDensity => cfg.model.uv_luminescence_density,
            FreeParam::DarkCountRate => cfg.model.dark_count_rate_hz,
            FreeParam::EtalonTransmission => cfg.losses.etalon_transmission,
        }
    }

    fn set(self, cfg: &mut DeviceConfig, v: f64) {
        match self {
            FreeParam::EtaNor => cfg.model.eta_nor = v,
            FreeParam::UvAbsorptionCoeff => cfg.model.uv_absorption_coeff = v,
            FreeParam::ModeMatching => cfg.losses.mode_matching = v,
            FreeParam::PairRateDensity => cfg.model.pair_rate_density = v,
            FreeParam::UvLuminescenceDensity => cfg.model.uv_luminescence_density = v,
            FreeParam::DarkCountRate => cfg.model.dark_count_rate_hz = v,
            FreeParam::EtalonTransmission => cfg.losses.etalon_transmission = v,
        }
    }

    /// Observables whose value moves with this parameter.
    fn constrained_by(self, obs: &Observable) -> bool {
        use FreeParam as F;
        use Observable as O;
        match (self, obs) {
            (F::EtaNor | F::UvAbsorptionCoeff, O::EtaInternal { .. } | O::EtaExternal { .. }) => true,
            (F::ModeMatching, O::EtaExternal { .. }) => true,
            (F::PairRateDensity | F::UvLuminescenceDensity, O::NoiseRate { pump_mw, .. } | O::OpticalNoise { pump_mw, .. }) => {
                *pump_mw > 0.0
            }
            (F::EtaNor, O::NoiseRate { pump_mw, .. } | O::OpticalNoise { pump_mw, .. }) => *pump_mw > 0.0,
            (F::DarkCountRate, O::NoiseRate { .. }) => true,
            (F::EtalonTransmission, O::EtalonTransmission) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    #[serde(flatten)]
    pub observable: Observable,
    pub target: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnchorResidual {
    pub anchor: Anchor,
    pub fitted: f64,
    /// `fitted/target − 1`.
    pub relative: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub params: Vec<(FreeParam, f64)>,
    pub residuals: Vec<AnchorResidual>,
    pub iterations: usize,
}

const FIT_MAX_ITER: usize = 200;

/// Least-squares fit of `free` parameters so the anchored observables match
/// their targets. Residuals are relative; parameters are fitted in log space
/// and so stay positive.
pub fn fit(base: &DeviceConfig, anchors: &[Anchor], free: &[FreeParam]) -> Result<(DeviceConfig, FitReport)> {
    for (k, a) in anchors.iter().enumerate() {
        if !(a.target > 0.0 && a.target.is_finite()) {
            return Err(Error::config(format!("anchor {k} target must be positive, got {}", a.target)));
        }
    }
    for (k, p) in free.iter().enumerate() {
        if free[..k].contains(p) {
            return Err(Error::config(format!("free parameter {p:?} listed twice")));
        }
    }
    if anchors.len() < free.len() {
        return Err(Error::config(format!(
            "underdetermined fit: {} free parameters but only {} anchors",
            free.len(),
            anchors.len()
        )));
    }
    let unconstrained: Vec<_> = free
        .iter()
        .filter(|p| !anchors.iter().any(|a| p.constrained_by(&a.observable)))
        .collect();
    if !unconstrained.is_empty() {
        return Err(Error::config(format!("no anchor constrains {unconstrained:?}")));
    }

    let apply = |x: &[f64]| {
        let mut cfg = base.clone();
        for (p, v) in free.iter().zip(x) {
            p.set(&mut cfg, v.exp());
        }
        cfg
    };
    let residuals = |x: &[f64]| -> Result<Vec<f64>> {
        let cfg = apply(x);
        anchors
            .iter()
            .map(|a| Ok(a.observable.evaluate(&cfg)? / a.target - 1.0))
            .collect()
    };
    let cost = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();

    let mut x: Vec<f64> = free.iter().map(|p| p.get(base).ln()).collect();
    let mut r = residuals(&x)?;
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = free.is_empty();
    while !converged && iterations < FIT_MAX_ITER {
        iterations += 1;
        let (m, n) = (anchors.len(), free.len());
        let mut jac = nalgebra::DMatrix::<f64>::zeros(m, n);
        for j in 0..n {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[j] += h;
            let rp = residuals(&xp)?;
            for i in 0..m {
                jac[(i, j)] = (rp[i] - r[i]) / h;
            }
        }
        let rv = nalgebra::DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &rv;
        if g.amax() < 1e-12 {
            converged = true;
            break;
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut a = jtj.clone();
            for d in 0..n {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            if let Ok(rt) = residuals(&trial) {
                if rt.iter().all(|v| v.is_finite()) && cost(&rt) <= cost(&r) {
                    let small = step.amax() < 1e-12 || cost(&r) - cost(&rt) <= 1e-15 * (1.0 + cost(&r));
                    x = trial;
                    r = rt;
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = true;
                    converged = small;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no descent direction left: stationary point
            converged = true;
        }
    }
    let cfg = apply(&x);
    let report = FitReport {
        params: free.iter().map(|p| (*p, p.get(&cfg))).collect(),
        residuals: anchors
            .iter()
            .zip(&r)
            .map(|(a, rel)| AnchorResidual {
                anchor: *a,
                fitted: a.target * (1.0 + rel),
                relative: *rel,
            })
            .collect(),
        iterations,
    };
    if !converged {
        let worst = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        return Err(Error::Convergence {
            what: format!("calibration fit, best residuals {:?}", r),
            achieved: worst,
            requested: 0.0,
        });
    }
    cfg.validate()?;
    Ok((cfg, report))
}
