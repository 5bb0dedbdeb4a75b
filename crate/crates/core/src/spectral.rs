//! Deterministic device physics: wavelength bookkeeping, phase matching,
//! conversion efficiency, spectral filters and noise-rate laws.
//!
//! Units at every public boundary: vacuum wavelengths in nm, optical
//! frequencies in THz, linewidths in GHz, pump powers in mW, rates in Hz.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in nm·THz.
pub const C_NM_THZ: f64 = 299_792.458;
/// Speed of light in mm/s.
pub const C_MM_PER_S: f64 = 2.997_924_58e11;
/// h·c in eV·nm.
pub const HC_EV_NM: f64 = 1_239.841_984;

/// Root of `sinc²(x) = 1/2`.
pub const SINC2_HALF_POINT: f64 = 1.391_557_378_251_510_3;

/// Signal wavelengths outside this window are reported as outside the
/// model's validity range.
pub const SIGNAL_VALIDITY_NM: (f64, f64) = (350.0, 2500.0);

pub fn wavelength_to_thz(lambda_nm: f64) -> f64 {
    C_NM_THZ / lambda_nm
}

pub fn thz_to_wavelength(nu_thz: f64) -> f64 {
    C_NM_THZ / nu_thz
}

/// Width in GHz of a wavelength interval `width_nm` centred at `center_nm`.
pub fn nm_width_to_ghz(center_nm: f64, width_nm: f64) -> f64 {
    C_NM_THZ * width_nm / (center_nm * center_nm) * 1e3
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be positive and finite, got {v}")))
    }
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must lie in (0, 1], got {v}")))
    }
}

/// Sum-frequency output wavelength, `1/λ_out = 1/λ_in + 1/λ_p`.
pub fn sfg_output_wavelength(lambda_input: f64, lambda_pump: f64) -> Result<f64> {
    check_positive("lambda_input", lambda_input)?;
    check_positive("lambda_pump", lambda_pump)?;
    Ok(1.0 / (1.0 / lambda_input + 1.0 / lambda_pump))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpdcSignal {
    pub wavelength_nm: f64,
    /// False when the signal falls outside [`SIGNAL_VALIDITY_NM`].
    pub within_validity: bool,
}

/// SPDC signal wavelength for a given idler, `1/λ_s = 1/λ_p − 1/λ_i`.
pub fn spdc_signal_wavelength(lambda_pump: f64, lambda_idler: f64) -> Result<SpdcSignal> {
    check_positive("lambda_pump", lambda_pump)?;
    check_positive("lambda_idler", lambda_idler)?;
    if lambda_idler <= lambda_pump {
        return Err(Error::domain(format!(
            "idler {lambda_idler} nm must be longer than pump {lambda_pump} nm"
        )));
    }
    let lambda = 1.0 / (1.0 / lambda_pump - 1.0 / lambda_idler);
    Ok(SpdcSignal {
        wavelength_nm: lambda,
        within_validity: (SIGNAL_VALIDITY_NM.0..=SIGNAL_VALIDITY_NM.1).contains(&lambda),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyGap {
    pub ev: f64,
    pub thz: f64,
}

/// Signed photon-energy difference `E(λ_a) − E(λ_b)`.
pub fn energy_gap(lambda_a: f64, lambda_b: f64) -> Result<EnergyGap> {
    check_positive("lambda_a", lambda_a)?;
    check_positive("lambda_b", lambda_b)?;
    let dk = 1.0 / lambda_a - 1.0 / lambda_b;
    Ok(EnergyGap {
        ev: HC_EV_NM * dk,
        thz: C_NM_THZ * dk,
    })
}

/// The four wavelengths of the cascaded process, tied by energy conservation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WavelengthTriple {
    pub lambda_input: f64,
    pub lambda_pump: f64,
    pub lambda_output: f64,
    pub lambda_signal: f64,
}

impl WavelengthTriple {
    pub fn from_input_and_pump(lambda_input: f64, lambda_pump: f64) -> Result<Self> {
        Ok(Self {
            lambda_input,
            lambda_pump,
            lambda_output: sfg_output_wavelength(lambda_input, lambda_pump)?,
            lambda_signal: spdc_signal_wavelength(lambda_pump, lambda_input)?.wavelength_nm,
        })
    }

    /// Largest violation of the two energy-conservation identities (nm⁻¹).
    pub fn closure_error(&self) -> f64 {
        let sfg = 1.0 / self.lambda_output - 1.0 / self.lambda_input - 1.0 / self.lambda_pump;
        let spdc = 1.0 / self.lambda_signal - 1.0 / self.lambda_pump + 1.0 / self.lambda_input;
        sfg.abs().max(spdc.abs())
    }

    pub fn output_thz(&self) -> f64 {
        wavelength_to_thz(self.lambda_output)
    }

    pub fn signal_thz(&self) -> f64 {
        wavelength_to_thz(self.lambda_signal)
    }
}

/// Refractive-index model of the nonlinear waveguide.
pub trait Dispersion {
    fn refractive_index(&self, lambda_nm: f64) -> Result<f64>;
}

impl<F> Dispersion for F
where
    F: Fn(f64) -> Option<f64>,
{
    fn refractive_index(&self, lambda_nm: f64) -> Result<f64> {
        self(lambda_nm).ok_or_else(|| Error::domain(format!("dispersion undefined at {lambda_nm} nm")))
    }
}

/// One band of a [`LinearizedDispersion`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionBand {
    pub center_nm: f64,
    pub half_width_nm: f64,
    /// Phase index at the band centre.
    pub index: f64,
    pub group_index: f64,
}

impl DispersionBand {
    /// Wavenumber `k = 2π·n/λ` is linear in frequency inside the band,
    /// `n(ν)·ν = n_ref·ν_ref + n_g·(ν − ν_ref)`.
    fn index_at(&self, lambda_nm: f64) -> f64 {
        let nu = wavelength_to_thz(lambda_nm);
        let nu_ref = wavelength_to_thz(self.center_nm);
        (self.index * nu_ref + self.group_index * (nu - nu_ref)) / nu
    }

    fn contains(&self, lambda_nm: f64) -> bool {
        (lambda_nm - self.center_nm).abs() <= self.half_width_nm
    }
}

/// Piecewise dispersion that is first order in frequency around the pump,
/// input and output bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizedDispersion {
    pub bands: Vec<DispersionBand>,
}

impl LinearizedDispersion {
    const INPUT_INDEX: f64 = 1.816;
    const PUMP_INDEX: f64 = 1.889;
    const INPUT_GROUP_INDEX: f64 = 1.85;
    const BAND_HALF_WIDTH_FRACTION: f64 = 0.05;

    /// Builds a dispersion with zero phase mismatch at `triple` for the
    /// given poling period, whose sinc² response has a full width at half
    /// maximum of `output_fwhm_ghz` in output frequency.
    pub fn calibrated(triple: &WavelengthTriple, model: &ConverterModel) -> Result<Self> {
        check_positive("poling_period", model.poling_period_um)?;
        check_positive("length", model.length_mm)?;
        check_positive("noise_bandwidth", model.noise_bandwidth_ghz)?;
        let period_nm = model.poling_period_um * 1e3;
        // n_o/λ_o = n_p/λ_p + n_i/λ_i + 1/Λ
        let output_index = triple.lambda_output
            * (Self::PUMP_INDEX / triple.lambda_pump + Self::INPUT_INDEX / triple.lambda_input + 1.0 / period_nm);
        // dΔk/dν_i = 2π·(n_g,o − n_g,i)/c; fix it from the sinc² width.
        let slope_rad_per_mm_per_thz = 4.0 * SINC2_HALF_POINT / (model.length_mm * model.noise_bandwidth_ghz * 1e-3);
        let delta_group = slope_rad_per_mm_per_thz * C_NM_THZ / (2.0 * std::f64::consts::PI * 1e6);
        let band = |center: f64, index: f64, group_index: f64| DispersionBand {
            center_nm: center,
            half_width_nm: center * Self::BAND_HALF_WIDTH_FRACTION,
            index,
            group_index,
        };
        Ok(Self {
            bands: vec![
                band(triple.lambda_pump, Self::PUMP_INDEX, Self::PUMP_INDEX),
                band(triple.lambda_input, Self::INPUT_INDEX, Self::INPUT_GROUP_INDEX),
                band(triple.lambda_output, output_index, Self::INPUT_GROUP_INDEX + delta_group),
            ],
        })
    }
}

impl Dispersion for LinearizedDispersion {
    fn refractive_index(&self, lambda_nm: f64) -> Result<f64> {
        self.bands
            .iter()
            .find(|b| b.contains(lambda_nm))
            .map(|b| b.index_at(lambda_nm))
            .ok_or_else(|| Error::domain(format!("dispersion undefined at {lambda_nm} nm")))
    }
}

/// Phase mismatch `Δk = 2π·(n_o/λ_o − n_p/λ_p − n_i/λ_i − 1/Λ)` in rad/mm.
pub fn qpm_mismatch(triple: &WavelengthTriple, model: &ConverterModel, dispersion: &dyn Dispersion) -> Result<f64> {
    let n_o = dispersion.refractive_index(triple.lambda_output)?;
    let n_p = dispersion.refractive_index(triple.lambda_pump)?;
    let n_i = dispersion.refractive_index(triple.lambda_input)?;
    let period_nm = model.poling_period_um * 1e3;
    let per_nm = n_o / triple.lambda_output - n_p / triple.lambda_pump - n_i / triple.lambda_input - 1.0 / period_nm;
    Ok(2.0 * std::f64::consts::PI * per_nm * 1e6)
}

pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// `sinc²(Δk·L/2)`.
pub fn phasematching_response(delta_k: f64, length_mm: f64) -> f64 {
    let s = sinc(0.5 * delta_k * length_mm);
    s * s
}

/// Physical parameters of the waveguide converter and its noise sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConverterModel {
    pub lambda_input_nm: f64,
    pub lambda_pump_nm: f64,
    pub length_mm: f64,
    pub poling_period_um: f64,
    /// Normalised efficiency η_nor (W⁻¹·mm⁻²) in `sin²(√(η_nor·P_eff)·L)`.
    pub eta_nor: f64,
    /// UV-absorption saturation coefficient c (W⁻¹), `P_eff = P·exp(−c·P)`.
    pub uv_absorption_coeff: f64,
    /// SPDC pair spectral density (pairs s⁻¹ mW⁻¹ GHz⁻¹ of idler bandwidth).
    pub pair_rate_density: f64,
    /// Width of the flat idler spectrum (GHz); also the simulated output band.
    pub pair_bandwidth_ghz: f64,
    /// FWHM of the sinc² phase-matching curve in output frequency (GHz).
    pub noise_bandwidth_ghz: f64,
    /// Broadband luminescence into the UV mode (photons s⁻¹ GHz⁻¹ mW⁻¹).
    pub uv_luminescence_density: f64,
    /// Broadband luminescence into the signal mode (photons s⁻¹ GHz⁻¹ mW⁻¹).
    pub signal_luminescence_density: f64,
    /// Fraction of the cascaded noise inside the etalon's mode acceptance.
    pub etalon_cascade_acceptance: f64,
    /// Transmission of the UV detection path used for the noise laws.
    pub uv_path_transmission: f64,
    /// Input photon flux I in front of the crystal (Hz).
    pub input_flux_hz: f64,
    pub dark_count_rate_hz: f64,
}

impl ConverterModel {
    pub fn validate(&self) -> Result<()> {
        check_positive("lambda_input_nm", self.lambda_input_nm)?;
        check_positive("lambda_pump_nm", self.lambda_pump_nm)?;
        check_positive("length_mm", self.length_mm)?;
        check_positive("poling_period_um", self.poling_period_um)?;
        check_positive("pair_bandwidth_ghz", self.pair_bandwidth_ghz)?;
        check_positive("noise_bandwidth_ghz", self.noise_bandwidth_ghz)?;
        check_fraction("etalon_cascade_acceptance", self.etalon_cascade_acceptance)?;
        check_fraction("uv_path_transmission", self.uv_path_transmission)?;
        for (name, v) in [
            ("eta_nor", self.eta_nor),
            ("uv_absorption_coeff", self.uv_absorption_coeff),
            ("pair_rate_density", self.pair_rate_density),
            ("uv_luminescence_density", self.uv_luminescence_density),
            ("signal_luminescence_density", self.signal_luminescence_density),
            ("input_flux_hz", self.input_flux_hz),
            ("dark_count_rate_hz", self.dark_count_rate_hz),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.lambda_input_nm <= self.lambda_pump_nm {
            return Err(Error::config("input wavelength must exceed the pump wavelength"));
        }
        Ok(())
    }

    pub fn triple(&self) -> WavelengthTriple {
        WavelengthTriple::from_input_and_pump(self.lambda_input_nm, self.lambda_pump_nm)
            .expect("validated model wavelengths")
    }

    /// Centre of the converted line (THz).
    pub fn output_thz(&self) -> f64 {
        wavelength_to_thz(sfg_output_wavelength(self.lambda_input_nm, self.lambda_pump_nm).unwrap_or(f64::NAN))
    }

    /// Phase-matching curve versus output-frequency offset from the QPM
    /// point, consistent with [`LinearizedDispersion::calibrated`].
    pub fn phasematching_lineshape(&self, offset_ghz: f64) -> f64 {
        let half_phase = 2.0 * SINC2_HALF_POINT * offset_ghz / self.noise_bandwidth_ghz;
        let s = sinc(half_phase);
        s * s
    }

    /// Pump power after the saturating UV-absorption correction (mW).
    pub fn effective_pump_mw(&self, pump_mw: f64) -> f64 {
        pump_mw * (-self.uv_absorption_coeff * pump_mw * 1e-3).exp()
    }

    /// Small-signal (unsaturated, linear in P) conversion probability used
    /// for broadband idlers in the cascaded noise process.
    pub fn small_signal_efficiency(&self, pump_mw: f64) -> f64 {
        (self.eta_nor * self.length_mm * self.length_mm * pump_mw * 1e-3).min(1.0)
    }

    /// SPDC pair rate over the whole idler band (pairs/s).
    pub fn pair_rate(&self, pump_mw: f64) -> f64 {
        self.pair_rate_density * pump_mw * self.pair_bandwidth_ghz
    }
}

/// Optical transmission factors between the crystal and the detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBudget {
    pub external_optics: f64,
    pub fiber_coupling: f64,
    pub detector_efficiency: f64,
    /// Only applied when an etalon is in the beam path.
    pub etalon_transmission: f64,
    /// Waveguide in-coupling; separates η_ext from η_int.
    pub mode_matching: f64,
}

impl LossBudget {
    pub fn validate(&self) -> Result<()> {
        check_fraction("external_optics", self.external_optics)?;
        check_fraction("fiber_coupling", self.fiber_coupling)?;
        check_fraction("detector_efficiency", self.detector_efficiency)?;
        check_fraction("etalon_transmission", self.etalon_transmission)?;
        check_fraction("mode_matching", self.mode_matching)
    }

    /// η_loss: product of the detection-path factors.
    pub fn eta_loss(&self, with_etalon: bool) -> f64 {
        let base = self.external_optics * self.fiber_coupling * self.detector_efficiency;
        if with_etalon {
            base * self.etalon_transmission
        } else {
            base
        }
    }

    pub fn with_detector_efficiency(mut self, eff: f64) -> Self {
        self.detector_efficiency = eff;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Etalon,
    Bandpass,
    Vbg,
    LorentzianLine,
    GaussianSpectrometer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralFilter {
    pub kind: FilterKind,
    pub center_thz: f64,
    pub fwhm_ghz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fsr_ghz: Option<f64>,
    pub peak_transmission: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_of_band_od: Option<f64>,
}

impl SpectralFilter {
    pub fn etalon(center_thz: f64, fsr_ghz: f64, fwhm_ghz: f64, peak_transmission: f64) -> Result<Self> {
        let f = Self {
            kind: FilterKind::Etalon,
            center_thz,
            fwhm_ghz,
            fsr_ghz: Some(fsr_ghz),
            peak_transmission,
            out_of_band_od: None,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn bandpass_nm(center_nm: f64, fwhm_nm: f64, peak_transmission: f64, od: f64) -> Result<Self> {
        check_positive("center_nm", center_nm)?;
        let f = Self {
            kind: FilterKind::Bandpass,
            center_thz: wavelength_to_thz(center_nm),
            fwhm_ghz: nm_width_to_ghz(center_nm, fwhm_nm),
            fsr_ghz: None,
            peak_transmission,
            out_of_band_od: Some(od),
        };
        f.validate()?;
        Ok(f)
    }

    pub fn vbg_nm(center_nm: f64, fwhm_nm: f64, peak_transmission: f64) -> Result<Self> {
        Self::gaussian_nm(FilterKind::Vbg, center_nm, fwhm_nm, peak_transmission)
    }

    pub fn spectrometer_nm(center_nm: f64, resolution_nm: f64) -> Result<Self> {
        Self::gaussian_nm(FilterKind::GaussianSpectrometer, center_nm, resolution_nm, 1.0)
    }

    fn gaussian_nm(kind: FilterKind, center_nm: f64, fwhm_nm: f64, peak: f64) -> Result<Self> {
        check_positive("center_nm", center_nm)?;
        let f = Self {
            kind,
            center_thz: wavelength_to_thz(center_nm),
            fwhm_ghz: nm_width_to_ghz(center_nm, fwhm_nm),
            fsr_ghz: None,
            peak_transmission: peak,
            out_of_band_od: None,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn lorentzian_line(center_thz: f64, fwhm_ghz: f64, peak_transmission: f64) -> Result<Self> {
        let f = Self {
            kind: FilterKind::LorentzianLine,
            center_thz,
            fwhm_ghz,
            fsr_ghz: None,
            peak_transmission,
            out_of_band_od: None,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        check_positive("center_thz", self.center_thz)?;
        check_positive("fwhm_ghz", self.fwhm_ghz)?;
        check_fraction("peak_transmission", self.peak_transmission)?;
        match self.kind {
            FilterKind::Etalon => {
                let fsr = self
                    .fsr_ghz
                    .ok_or_else(|| Error::domain("etalon requires a free spectral range"))?;
                if !(self.fwhm_ghz < fsr) {
                    return Err(Error::domain(format!(
                        "etalon FWHM {} GHz must be below its FSR {fsr} GHz",
                        self.fwhm_ghz
                    )));
                }
            }
            FilterKind::Bandpass => {
                let od = self.out_of_band_od.unwrap_or(0.0);
                if !(od >= 0.0) {
                    return Err(Error::domain("optical density must be >= 0"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Finesse FSR/FWHM (etalons only).
    pub fn finesse(&self) -> Option<f64> {
        self.fsr_ghz.map(|fsr| fsr / self.fwhm_ghz)
    }

    /// Power transmission at optical frequency `nu_thz`.
    pub fn transmission(&self, nu_thz: f64) -> f64 {
        let detuning_ghz = (nu_thz - self.center_thz) * 1e3;
        let peak = self.peak_transmission;
        match self.kind {
            FilterKind::Etalon => {
                let fsr = self.fsr_ghz.unwrap_or(f64::INFINITY);
                let coeff = 2.0 * (fsr / self.fwhm_ghz) / std::f64::consts::PI;
                let s = (std::f64::consts::PI * detuning_ghz / fsr).sin();
                peak / (1.0 + coeff * coeff * s * s)
            }
            FilterKind::Bandpass => {
                if detuning_ghz.abs() <= 0.5 * self.fwhm_ghz {
                    peak
                } else {
                    peak * 10f64.powf(-self.out_of_band_od.unwrap_or(0.0))
                }
            }
            FilterKind::Vbg | FilterKind::GaussianSpectrometer => {
                let x = detuning_ghz / self.fwhm_ghz;
                peak * (-4.0 * std::f64::consts::LN_2 * x * x).exp()
            }
            FilterKind::LorentzianLine => {
                let x = 2.0 * detuning_ghz / self.fwhm_ghz;
                peak / (1.0 + x * x)
            }
        }
    }

    /// Standard deviation (GHz) of a Gaussian response.
    pub fn gaussian_sigma_ghz(&self) -> f64 {
        self.fwhm_ghz / (8.0 * std::f64::consts::LN_2).sqrt()
    }
}

/// Product of the transmissions of every filter that sits in the beam path.
/// Spectrometer responses are excluded; they act as a convolution kernel.
pub fn stack_transmission(filters: &[SpectralFilter], nu_thz: f64) -> f64 {
    filters
        .iter()
        .filter(|f| f.kind != FilterKind::GaussianSpectrometer)
        .map(|f| f.transmission(nu_thz))
        .product()
}

pub fn has_etalon(filters: &[SpectralFilter]) -> bool {
    filters.iter().any(|f| f.kind == FilterKind::Etalon)
}

/// Conversion efficiency at pump power `pump_mw`.
///
/// `η_int = sin²(√(η_nor·P_eff)·L)`, `η_ext = η_int·mode_matching`. The
/// external value is referenced to the crystal's input facet; detection
/// path losses are not included.
pub fn conversion_efficiency(pump_mw: f64, model: &ConverterModel, internal: bool, losses: &LossBudget) -> Result<f64> {
    if !(pump_mw >= 0.0 && pump_mw.is_finite()) {
        return Err(Error::domain(format!("pump power must be >= 0, got {pump_mw}")));
    }
    let p_eff_w = model.effective_pump_mw(pump_mw) * 1e-3;
    let angle = (model.eta_nor * p_eff_w).sqrt() * model.length_mm;
    let eta_int = angle.sin().powi(2);
    Ok(if internal { eta_int } else { eta_int * losses.mode_matching })
}

/// Step and window for integrating a density through a filter stack.
struct Quadrature {
    lo_ghz: f64,
    hi_ghz: f64,
    step_ghz: f64,
}

impl Quadrature {
    const MAX_POINTS: usize = 4_000_000;

    /// Offsets are relative to `center_thz`; the support is the model's
    /// output band `±pair_bandwidth/2`.
    fn for_stack(filters: &[SpectralFilter], model: &ConverterModel, center_thz: f64) -> Self {
        let half = 0.5 * model.pair_bandwidth_ghz;
        let (mut lo, mut hi) = (-half, half);
        let mut step = model.noise_bandwidth_ghz / 200.0;
        for f in filters {
            let offset = (f.center_thz - center_thz) * 1e3;
            match f.kind {
                FilterKind::Etalon => step = step.min(f.fwhm_ghz / 16.0),
                FilterKind::LorentzianLine => {
                    step = step.min(f.fwhm_ghz / 16.0);
                    lo = lo.max(offset - 4000.0 * f.fwhm_ghz);
                    hi = hi.min(offset + 4000.0 * f.fwhm_ghz);
                }
                FilterKind::Vbg => {
                    step = step.min(f.fwhm_ghz / 16.0);
                    lo = lo.max(offset - 6.0 * f.fwhm_ghz);
                    hi = hi.min(offset + 6.0 * f.fwhm_ghz);
                }
                FilterKind::Bandpass | FilterKind::GaussianSpectrometer => {}
            }
        }
        if hi <= lo {
            hi = lo;
        }
        let span = hi - lo;
        if span / step > Self::MAX_POINTS as f64 {
            step = span / Self::MAX_POINTS as f64;
        }
        Self {
            lo_ghz: lo,
            hi_ghz: hi,
            step_ghz: step,
        }
    }

    /// Trapezoidal integral of `f(offset_ghz)` over the window (GHz·[f]).
    fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        let span = self.hi_ghz - self.lo_ghz;
        if span <= 0.0 {
            return 0.0;
        }
        let n = (span / self.step_ghz).ceil().max(1.0) as usize;
        let h = span / n as f64;
        let mut acc = 0.5 * (f(self.lo_ghz) + f(self.hi_ghz));
        for k in 1..n {
            acc += f(self.lo_ghz + k as f64 * h);
        }
        acc * h
    }
}

/// Effective bandwidths (GHz) of a filter stack for the two noise spectra.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseBandwidths {
    /// `∫ T(ν) dν` over the output band (flat spectrum).
    pub flat_ghz: f64,
    /// `∫ T(ν)·φ(ν) dν` with φ the phase-matching curve.
    pub phasematched_ghz: f64,
}

pub fn noise_bandwidths(filters: &[SpectralFilter], model: &ConverterModel) -> NoiseBandwidths {
    let center = model.output_thz();
    let quad = Quadrature::for_stack(filters, model, center);
    let t = |d: f64| stack_transmission(filters, center + d * 1e-3);
    NoiseBandwidths {
        flat_ghz: quad.integrate(t),
        phasematched_ghz: quad.integrate(|d| t(d) * model.phasematching_lineshape(d)),
    }
}

/// Noise-rate contributions at the UV detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseBreakdown {
    pub dark_hz: f64,
    /// Linear-in-power broadband luminescence.
    pub luminescence_hz: f64,
    /// Quadratic-in-power cascaded SPDC/SFG noise.
    pub cascaded_hz: f64,
}

impl NoiseBreakdown {
    pub fn total(&self) -> f64 {
        self.dark_hz + self.luminescence_hz + self.cascaded_hz
    }

    pub fn optical(&self) -> f64 {
        self.luminescence_hz + self.cascaded_hz
    }
}

/// Rate coefficients that turn a stack's effective bandwidths into noise.
fn cascaded_density_per_mw2(model: &ConverterModel) -> f64 {
    // pairs/(s·mW·GHz) × conversion per mW × path transmission
    model.pair_rate_density * model.small_signal_efficiency(1.0) * model.uv_path_transmission
}

fn luminescence_density_per_mw(model: &ConverterModel) -> f64 {
    model.uv_luminescence_density * model.uv_path_transmission
}

pub fn noise_components(pump_mw: f64, filters: &[SpectralFilter], model: &ConverterModel) -> Result<NoiseBreakdown> {
    if !(pump_mw >= 0.0 && pump_mw.is_finite()) {
        return Err(Error::domain(format!("pump power must be >= 0, got {pump_mw}")));
    }
    if pump_mw == 0.0 {
        return Ok(NoiseBreakdown {
            dark_hz: model.dark_count_rate_hz,
            luminescence_hz: 0.0,
            cascaded_hz: 0.0,
        });
    }
    let bw = noise_bandwidths(filters, model);
    let acceptance = if has_etalon(filters) {
        model.etalon_cascade_acceptance
    } else {
        1.0
    };
    Ok(NoiseBreakdown {
        dark_hz: model.dark_count_rate_hz,
        luminescence_hz: luminescence_density_per_mw(model) * pump_mw * bw.flat_ghz,
        cascaded_hz: cascaded_density_per_mw2(model) * pump_mw * pump_mw * bw.phasematched_ghz * acceptance,
    })
}

/// `N(P) = dark + B_lin·a₁·P + B_pm·a₂·P²`.
pub fn noise_rate(pump_mw: f64, filters: &[SpectralFilter], model: &ConverterModel) -> Result<f64> {
    Ok(noise_components(pump_mw, filters, model)?.total())
}

/// Predicted UV count rates with and without input light.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignalPrediction {
    /// Converted input photons reaching the detector, `I·η_loss·η_ext`.
    pub converted_hz: f64,
    pub noise_hz: f64,
    /// Rate with input present (S).
    pub total_hz: f64,
    /// `S/N`.
    pub snr: f64,
}

/// `S = I·η_loss·η_ext(P) + N(P)`.
pub fn detected_signal_rate(
    model: &ConverterModel,
    pump_mw: f64,
    losses: &LossBudget,
    filters: &[SpectralFilter],
) -> Result<SignalPrediction> {
    let eta_ext = conversion_efficiency(pump_mw, model, false, losses)?;
    let eta_loss = losses.eta_loss(has_etalon(filters));
    let converted = model.input_flux_hz * eta_loss * eta_ext;
    let noise = noise_rate(pump_mw, filters, model)?;
    let total = converted + noise;
    Ok(SignalPrediction {
        converted_hz: converted,
        noise_hz: noise,
        total_hz: total,
        snr: if noise > 0.0 { total / noise } else { f64::INFINITY },
    })
}

/// Noise spectrum in Hz per grid bin, as seen through the filter stack and,
/// if a [`FilterKind::GaussianSpectrometer`] is present, blurred by it.
///
/// `grid_thz` must be strictly increasing. Each point's bin spans halfway to
/// its neighbours.
pub fn noise_spectrum(
    pump_mw: f64,
    filters: &[SpectralFilter],
    model: &ConverterModel,
    grid_thz: &[f64],
) -> Result<Vec<f64>> {
    if grid_thz.is_empty() {
        return Err(Error::domain("empty frequency grid"));
    }
    if grid_thz.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::domain("frequency grid must be strictly increasing"));
    }
    if !(pump_mw >= 0.0) {
        return Err(Error::domain("pump power must be >= 0"));
    }
    let center = model.output_thz();
    let half_band = 0.5 * model.pair_bandwidth_ghz;
    let acceptance = if has_etalon(filters) {
        model.etalon_cascade_acceptance
    } else {
        1.0
    };
    let lum = luminescence_density_per_mw(model) * pump_mw;
    let casc = cascaded_density_per_mw2(model) * pump_mw * pump_mw * acceptance;
    // Hz/GHz after the filter stack
    let density = |nu: f64| {
        let d = (nu - center) * 1e3;
        if d.abs() > half_band {
            return 0.0;
        }
        (lum + casc * model.phasematching_lineshape(d)) * stack_transmission(filters, nu)
    };

    let widths: Vec<f64> = (0..grid_thz.len())
        .map(|k| {
            let lo = if k == 0 { grid_thz[0] } else { 0.5 * (grid_thz[k - 1] + grid_thz[k]) };
            let hi = if k + 1 == grid_thz.len() {
                grid_thz[k]
            } else {
                0.5 * (grid_thz[k] + grid_thz[k + 1])
            };
            (hi - lo) * 1e3
        })
        .collect();
    let widths = if grid_thz.len() == 1 { vec![1.0] } else { widths };

    let spectrometer = filters.iter().find(|f| f.kind == FilterKind::GaussianSpectrometer);
    let Some(spec) = spectrometer else {
        return Ok(grid_thz.iter().zip(&widths).map(|(&nu, &w)| density(nu) * w).collect());
    };

    // Fine sampling resolves the narrowest in-path filter.
    let mut step = model.noise_bandwidth_ghz / 200.0;
    for f in filters {
        if f.kind != FilterKind::Bandpass && f.kind != FilterKind::GaussianSpectrometer {
            step = step.min(f.fwhm_ghz / 8.0);
        }
    }
    let sigma = spec.gaussian_sigma_ghz();
    let reach = 5.0 * sigma;
    let lo = grid_thz[0] * 1e3 - reach;
    let hi = grid_thz[grid_thz.len() - 1] * 1e3 + reach;
    let n = ((hi - lo) / step).ceil() as usize + 1;
    let fine: Vec<f64> = (0..n).map(|j| density((lo + j as f64 * step) * 1e-3)).collect();
    let norm = step / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let out = grid_thz
        .iter()
        .zip(&widths)
        .map(|(&nu, &w)| {
            let x = nu * 1e3;
            let j0 = (((x - reach - lo) / step).floor().max(0.0)) as usize;
            let j1 = (((x + reach - lo) / step).ceil() as usize).min(n - 1);
            let mut acc = 0.0;
            for (j, v) in fine.iter().enumerate().take(j1 + 1).skip(j0) {
                let u = (lo + j as f64 * step - x) / sigma;
                acc += v * (-0.5 * u * u).exp();
            }
            acc * norm * w
        })
        .collect();
    Ok(out)
}
