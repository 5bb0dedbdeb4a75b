//! Computations behind each scenario kind.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::plot::{svg_plot, Series};
use super::{num, RunContext, Scenario, ScenarioData, ScenarioKind, Table, TableOut};
use crate::calibration::{DeviceConfig, UvPath};
use crate::error::{Error, Result};
use crate::fock::{cascaded_evolution, correlation_observables, CouplingParams, FockBasis, Mode};
use crate::montecarlo::{generate_streams, splitmix64, ChannelConfig, ChannelRole, ScenarioConfig};
use crate::spectral::{
    conversion_efficiency, detected_signal_rate, has_etalon, noise_rate, noise_spectrum, thz_to_wavelength, LossBudget,
};
use crate::tagcorr::{
    cauchy_schwarz_test, coincidence_histogram, dead_time_corrected_rate, g2_auto, power_law_fit, rate_metrics, PeakMode,
    RateInput, THERMAL_AUTO,
};

/// Projected efficiency reachable with a pulsed pump.
pub const PULSED_CEILING: f64 = 0.30;
pub const SNR_DURATION_S: f64 = 2.0;
pub const UNFILTERED_NOISE_DURATION_S: f64 = 0.02;
pub const FILTERED_NOISE_DURATION_S: f64 = 1.0;
pub const NOISE_SEEDS: u32 = 20;
pub const COINCIDENCE_BIN_PS: u64 = 165;
pub const COINCIDENCE_BINS_EACH_SIDE: u32 = 50;
pub const LOW_PUMP_DURATION_S: f64 = 30.0;
pub const HIGH_PUMP_DURATION_S: f64 = 2.0;
/// Spectrum grid: `ν0 ± SPECTRUM_HALF_SPAN_THZ` in steps of this size.
pub const SPECTRUM_STEP_THZ: f64 = 0.025;
pub const SPECTRUM_HALF_SPAN_THZ: f64 = 9.5;
/// Offsets from ν0 over which the spectral floor is averaged.
pub const SPECTRUM_FLOOR_THZ: (f64, f64) = (7.0, 9.5);
pub const FOCK_KAPPA: f64 = 0.05;
pub const FOCK_GAMMA: f64 = 0.05;

pub(crate) fn compute(s: &Scenario, ctx: &RunContext, seed: u64) -> Result<ScenarioData> {
    match s.kind {
        ScenarioKind::EfficiencySweep => efficiency_sweep(s, ctx),
        ScenarioKind::SnrSweep => snr_sweep(s, ctx, seed),
        ScenarioKind::NoiseSweep => noise_sweep(s, ctx, seed),
        ScenarioKind::NoiseSpectrum => spectrum(s, ctx),
        ScenarioKind::CoincidenceSi | ScenarioKind::CoincidenceSo => coincidence(s, ctx, seed),
        ScenarioKind::FockDemo => fock_demo(s, ctx),
    }
}

fn stamp(ctx: &RunContext) -> String {
    format!("tool_version={} config_hash={}", crate::VERSION, ctx.config_hash)
}

fn path_label(p: UvPath) -> &'static str {
    match p {
        UvPath::Unfiltered => "unfiltered",
        UvPath::Etalon => "etalon",
        UvPath::IonLine => "ion_line",
    }
}

fn arm(external_optics: f64, fiber_coupling: f64, detector_efficiency: f64) -> LossBudget {
    LossBudget {
        external_optics,
        fiber_coupling,
        detector_efficiency,
        etalon_transmission: 1.0,
        mode_matching: 1.0,
    }
}

/// UV detector behind the given filter path.
pub fn uv_channel(cfg: &DeviceConfig, path: UvPath) -> ChannelConfig {
    ChannelConfig::new(0, ChannelRole::Uv, cfg.losses, cfg.model.dark_count_rate_hz).with_filters(cfg.uv_path(path))
}

/// Signal and idler detectors for the low-pump pair-correlation run. The
/// idler arm takes the unconverted 1311 nm light without spectral filtering.
pub fn pair_channels(cfg: &DeviceConfig) -> Vec<ChannelConfig> {
    vec![
        ChannelConfig::new(1, ChannelRole::Signal, arm(0.5, 0.5, 0.2), 300.0).with_filters(vec![cfg.filters.signal_bandpass]),
        ChannelConfig::new(2, ChannelRole::Idler, arm(0.5, 0.2, 0.1), 200.0),
    ]
}

/// Signal and UV detectors for the high-pump cascade-correlation run. The
/// signal arm is attenuated to keep its detector out of saturation.
pub fn cascade_channels(cfg: &DeviceConfig) -> Vec<ChannelConfig> {
    vec![
        ChannelConfig::new(1, ChannelRole::Signal, arm(0.5, 0.04, 0.2), 300.0).with_filters(vec![cfg.filters.vbg]),
        uv_channel(cfg, UvPath::Unfiltered),
    ]
}

fn efficiency_sweep(s: &Scenario, ctx: &RunContext) -> Result<ScenarioData> {
    let cfg = &ctx.config;
    let mut t = Table::new(&["pump_mw", "eta_internal", "eta_external"]);
    let mut int_pts = Vec::new();
    let mut ext_pts = Vec::new();
    let mut max_int: f64 = 0.0;
    for &p in &s.pump_mw {
        let ei = conversion_efficiency(p, &cfg.model, true, &cfg.losses)?;
        let ee = conversion_efficiency(p, &cfg.model, false, &cfg.losses)?;
        max_int = max_int.max(ei);
        t.push(vec![num(p), num(ei), num(ee)]);
        int_pts.push((p, ei));
        ext_pts.push((p, ee));
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("eta_internal_200mw".into(), conversion_efficiency(200.0, &cfg.model, true, &cfg.losses)?);
    metrics.insert("eta_external_200mw".into(), conversion_efficiency(200.0, &cfg.model, false, &cfg.losses)?);
    metrics.insert("max_eta_internal".into(), max_int);
    metrics.insert("pulsed_ceiling_margin".into(), PULSED_CEILING - max_int);
    let plot = svg_plot(
        "Conversion efficiency",
        "pump power (mW)",
        "efficiency",
        false,
        false,
        &[
            Series { label: "internal".into(), points: int_pts },
            Series { label: "external".into(), points: ext_pts },
        ],
        &stamp(ctx),
    );
    Ok(ScenarioData {
        tables: vec![(String::new(), TableOut::Plain(t))],
        plot: Some(plot),
        metrics,
    })
}

fn simulate_uv_rate(cfg: &DeviceConfig, path: UvPath, pump_mw: f64, flux_hz: f64, duration_s: f64, seed: u64) -> Result<(f64, u64)> {
    let ch = uv_channel(cfg, path);
    let dead = ch.dead_time_ns;
    let sc = ScenarioConfig {
        pump_mw,
        input_flux_hz: flux_hz,
        duration_s,
        seed,
        channels: vec![ch],
    };
    let streams = generate_streams(&sc, &cfg.model)?;
    Ok((dead_time_corrected_rate(&streams[0], dead)?, streams[0].len() as u64))
}

fn sorted_paths(s: &Scenario, default: &[UvPath]) -> Vec<UvPath> {
    if s.paths.is_empty() {
        default.to_vec()
    } else {
        s.paths.clone()
    }
}

fn snr_sweep(s: &Scenario, ctx: &RunContext, seed: u64) -> Result<ScenarioData> {
    let cfg = &ctx.config;
    let paths = sorted_paths(s, &[UvPath::Etalon]);
    let duration = s.duration_s.unwrap_or(SNR_DURATION_S);
    let flux = cfg.model.input_flux_hz;
    let jobs: Vec<(usize, UvPath, f64)> = paths
        .iter()
        .flat_map(|&path| s.pump_mw.iter().map(move |&p| (path, p)))
        .enumerate()
        .map(|(k, (path, p))| (k, path, p))
        .collect();
    let rows: Vec<_> = jobs
        .par_iter()
        .map(|&(k, path, p)| -> Result<_> {
            let (with, n_with) = simulate_uv_rate(cfg, path, p, flux, duration, splitmix64(seed ^ (2 * k as u64)))?;
            let (without, n_without) = simulate_uv_rate(cfg, path, p, 0.0, duration, splitmix64(seed ^ (2 * k as u64 + 1)))?;
            let filters = cfg.uv_path(path);
            let m = rate_metrics(
                RateInput::Rate(with),
                RateInput::Rate(without),
                flux,
                &cfg.losses,
                has_etalon(&filters),
                cfg.losses.mode_matching,
            )?;
            let sigma = m.snr * (1.0 / n_with.max(1) as f64 + 1.0 / n_without.max(1) as f64).sqrt();
            let model = detected_signal_rate(&cfg.model, p, &cfg.losses, &filters)?;
            Ok((path, p, m, sigma, model.snr))
        })
        .collect::<Result<_>>()?;

    let mut t = Table::new(&[
        "path",
        "pump_mw",
        "with_input_hz",
        "without_input_hz",
        "snr",
        "snr_sigma",
        "model_snr",
        "eta_external",
        "eta_internal",
    ]);
    let mut metrics = BTreeMap::new();
    let mut series = Vec::new();
    for &path in &paths {
        let label = path_label(path);
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for (_, p, m, sigma, model_snr) in rows.iter().filter(|r| r.0 == path) {
            t.push(vec![
                label.into(),
                num(*p),
                num(m.s_hz),
                num(m.n_hz),
                num(m.snr),
                num(*sigma),
                num(*model_snr),
                num(m.eta_ext),
                num(m.eta_int),
            ]);
            pts.push((*p, m.snr));
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let low: Vec<f64> = pts.iter().filter(|q| q.0 <= 200.0).map(|q| q.1).collect();
        if !low.is_empty() {
            metrics.insert(format!("min_snr_to_200mw_{label}"), low.iter().copied().fold(f64::INFINITY, f64::min));
        }
        let high: Vec<f64> = pts.iter().filter(|q| q.0 >= 200.0).map(|q| q.1).collect();
        if high.len() >= 2 {
            let monotone = high.windows(2).all(|w| w[1] < w[0]);
            metrics.insert(format!("snr_decreasing_above_200mw_{label}"), if monotone { 1.0 } else { 0.0 });
        }
        if let Some(q) = pts.iter().find(|q| q.0 == 200.0) {
            metrics.insert(format!("snr_200mw_{label}"), q.1);
        }
        series.push(Series {
            label: label.into(),
            points: pts,
        });
    }
    let plot = svg_plot("Signal-to-noise ratio", "pump power (mW)", "SNR", false, false, &series, &stamp(ctx));
    Ok(ScenarioData {
        tables: vec![(String::new(), TableOut::Plain(t))],
        plot: Some(plot),
        metrics,
    })
}

fn noise_sweep(s: &Scenario, ctx: &RunContext, seed: u64) -> Result<ScenarioData> {
    let cfg = &ctx.config;
    let paths = sorted_paths(s, &[UvPath::Unfiltered, UvPath::Etalon]);
    let seeds = s.seeds.unwrap_or(NOISE_SEEDS);
    let dark = cfg.model.dark_count_rate_hz;
    let mut jobs = Vec::new();
    for &path in &paths {
        for r in 0..seeds {
            for &p in &s.pump_mw {
                jobs.push((path, r, p));
            }
        }
    }
    let rates: Vec<(f64, u64)> = jobs
        .par_iter()
        .enumerate()
        .map(|(k, &(path, _, p))| {
            let duration = s.duration_s.unwrap_or(match path {
                UvPath::Unfiltered => UNFILTERED_NOISE_DURATION_S,
                _ => FILTERED_NOISE_DURATION_S,
            });
            simulate_uv_rate(cfg, path, p, 0.0, duration, splitmix64(seed ^ k as u64))
        })
        .collect::<Result<_>>()?;

    let mut t = Table::new(&["path", "seed_index", "pump_mw", "counts", "rate_hz"]);
    for (&(path, r, p), &(rate, n)) in jobs.iter().zip(&rates) {
        t.push(vec![path_label(path).into(), r.to_string(), num(p), n.to_string(), num(rate)]);
    }
    let mut fits = Table::new(&["path", "seed_index", "exponent", "uncertainty", "used_points"]);
    let mut metrics = BTreeMap::new();
    let mut series = Vec::new();
    for &path in &paths {
        let label = path_label(path);
        let mut exps = Vec::new();
        for r in 0..seeds {
            let pts: Vec<(f64, f64)> = jobs
                .iter()
                .zip(&rates)
                .filter(|(j, _)| j.0 == path && j.1 == r)
                .map(|(j, v)| (j.2, v.0))
                .collect();
            let fit = power_law_fit(&pts, dark)?;
            fits.push(vec![
                label.into(),
                r.to_string(),
                num(fit.exponent),
                num(fit.uncertainty),
                fit.used_points.to_string(),
            ]);
            exps.push(fit.exponent);
        }
        let mean = exps.iter().sum::<f64>() / exps.len() as f64;
        metrics.insert(format!("exponent_mean_{label}"), mean);
        metrics.insert(format!("exponent_min_{label}"), exps.iter().copied().fold(f64::INFINITY, f64::min));
        metrics.insert(format!("exponent_max_{label}"), exps.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let filters = cfg.uv_path(path);
        let model_pts: Vec<(f64, f64)> = s
            .pump_mw
            .iter()
            .map(|&p| Ok((p, noise_rate(p, &filters, &cfg.model)?)))
            .collect::<Result<_>>()?;
        metrics.insert(format!("model_exponent_{label}"), power_law_fit(&model_pts, dark)?.exponent);
        let mean_pts: Vec<(f64, f64)> = s
            .pump_mw
            .iter()
            .map(|&p| {
                let v: Vec<f64> = jobs
                    .iter()
                    .zip(&rates)
                    .filter(|(j, _)| j.0 == path && j.2 == p)
                    .map(|(_, v)| v.0 - dark)
                    .collect();
                (p, v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        series.push(Series {
            label: label.into(),
            points: mean_pts,
        });
    }
    let plot = svg_plot(
        "Dark-subtracted noise rate",
        "pump power (mW)",
        "rate (Hz)",
        true,
        true,
        &series,
        &stamp(ctx),
    );
    Ok(ScenarioData {
        tables: vec![
            (String::new(), TableOut::Plain(t)),
            ("exponents".into(), TableOut::Plain(fits)),
        ],
        plot: Some(plot),
        metrics,
    })
}

/// Frequencies of the spectrum scan, ascending.
pub fn spectrum_grid(cfg: &DeviceConfig) -> Vec<f64> {
    let nu0 = cfg.model.output_thz();
    let n = (2.0 * SPECTRUM_HALF_SPAN_THZ / SPECTRUM_STEP_THZ).round() as i64;
    (0..=n).map(|k| nu0 - SPECTRUM_HALF_SPAN_THZ + k as f64 * SPECTRUM_STEP_THZ).collect()
}

/// Peak over mean floor, with the floor averaged over the far wings.
pub fn peak_to_floor(grid: &[f64], values: &[f64], nu0: f64) -> f64 {
    let peak = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = SPECTRUM_FLOOR_THZ;
    let wings: Vec<f64> = grid
        .iter()
        .zip(values)
        .filter(|(nu, _)| {
            let d = (*nu - nu0).abs();
            d >= lo - 1e-9 && d <= hi + 1e-9
        })
        .map(|(_, v)| *v)
        .collect();
    peak / (wings.iter().sum::<f64>() / wings.len() as f64)
}

fn spectrum(s: &Scenario, ctx: &RunContext) -> Result<ScenarioData> {
    let cfg = &ctx.config;
    let p = s.pump_mw[0];
    let grid = spectrum_grid(cfg);
    let nu0 = cfg.model.output_thz();
    let plain = noise_spectrum(p, &[cfg.filters.spectrometer], &cfg.model, &grid)?;
    let etalon = noise_spectrum(p, &[cfg.filters.etalon, cfg.filters.spectrometer], &cfg.model, &grid)?;

    let mut t = Table::new(&["wavelength_nm", "frequency_thz", "unfiltered_hz", "etalon_hz"]);
    for k in (0..grid.len()).rev() {
        t.push(vec![num(thz_to_wavelength(grid[k])), num(grid[k]), num(plain[k]), num(etalon[k])]);
    }
    let imax = plain
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .ok_or_else(|| Error::domain("empty spectrum"))?;
    let r_plain = peak_to_floor(&grid, &plain, nu0);
    let r_etalon = peak_to_floor(&grid, &etalon, nu0);

    // width of the unfiltered peak at half its height above the floor
    let floor = plain[imax] / r_plain;
    let half = floor + 0.5 * (plain[imax] - floor);
    let crossing = |step: isize| -> f64 {
        let mut k = imax as isize;
        while k + step >= 0 && ((k + step) as usize) < plain.len() && plain[(k + step) as usize] > half {
            k += step;
        }
        let (a, b) = (k as usize, (k + step).clamp(0, plain.len() as isize - 1) as usize);
        if a == b || plain[a] == plain[b] {
            return grid[a];
        }
        grid[a] + (grid[b] - grid[a]) * (plain[a] - half) / (plain[a] - plain[b])
    };
    let (nu_lo, nu_hi) = (crossing(-1), crossing(1));
    let fwhm_nm = thz_to_wavelength(nu_lo) - thz_to_wavelength(nu_hi);

    let mut metrics = BTreeMap::new();
    metrics.insert("peak_wavelength_nm".into(), thz_to_wavelength(grid[imax]));
    metrics.insert("peak_to_floor_unfiltered".into(), r_plain);
    metrics.insert("peak_to_floor_etalon".into(), r_etalon);
    metrics.insert("peak_reduction".into(), r_plain / r_etalon);
    metrics.insert("peak_fwhm_nm".into(), fwhm_nm);
    let to_series = |label: &str, v: &[f64]| Series {
        label: label.into(),
        points: grid.iter().zip(v).map(|(nu, y)| (thz_to_wavelength(*nu), *y)).collect(),
    };
    let plot = svg_plot(
        "Noise spectrum",
        "wavelength (nm)",
        "rate per bin (Hz)",
        false,
        true,
        &[to_series("unfiltered", &plain), to_series("etalon", &etalon)],
        &stamp(ctx),
    );
    Ok(ScenarioData {
        tables: vec![(String::new(), TableOut::Plain(t))],
        plot: Some(plot),
        metrics,
    })
}

fn coincidence(s: &Scenario, ctx: &RunContext, seed: u64) -> Result<ScenarioData> {
    let cfg = &ctx.config;
    let low = s.kind == ScenarioKind::CoincidenceSi;
    let channels = match &s.channels {
        Some(c) => c.clone(),
        None if low => pair_channels(cfg),
        None => cascade_channels(cfg),
    };
    let partner = if low { ChannelRole::Idler } else { ChannelRole::Uv };
    let sc = ScenarioConfig {
        pump_mw: s.pump_mw[0],
        input_flux_hz: 0.0,
        duration_s: s.duration_s.unwrap_or(if low { LOW_PUMP_DURATION_S } else { HIGH_PUMP_DURATION_S }),
        seed,
        channels,
    };
    let streams = generate_streams(&sc, &cfg.model)?;
    let pick = |role: ChannelRole| {
        let idx = sc.channels.iter().position(|c| c.role == role).expect("validated channel roles");
        &streams[idx]
    };
    let (a, b) = (pick(ChannelRole::Signal), pick(partner));
    let bin = s.bin_width_ps.unwrap_or(COINCIDENCE_BIN_PS);
    let half = (s.bins_each_side.unwrap_or(COINCIDENCE_BINS_EACH_SIDE) as u64 * bin) as i64;
    let hist = coincidence_histogram(a, b, bin, (-half, half))?;
    let (g2, peak) = g2_auto(&hist, PeakMode::Fwhm)?;
    let (g2_max, _) = g2_auto(&hist, PeakMode::MaxBin)?;
    let cs = cauchy_schwarz_test(&g2, THERMAL_AUTO, THERMAL_AUTO)?;

    let mut metrics = BTreeMap::new();
    metrics.insert("g2".into(), g2.g2);
    metrics.insert("g2_sigma".into(), g2.sigma);
    metrics.insert("g2_max_bin".into(), g2_max.g2);
    metrics.insert("cs_bound".into(), cs.bound);
    metrics.insert("cs_violation_sigma".into(), cs.sigma_violation);
    metrics.insert("peak_fwhm_ps".into(), peak.fwhm_ps);
    metrics.insert("peak_counts".into(), g2.peak_counts as f64);
    metrics.insert("singles_signal_hz".into(), a.rate_hz());
    metrics.insert("singles_partner_hz".into(), b.rate_hz());
    let pts: Vec<(f64, f64)> = hist.counts.iter().enumerate().map(|(k, c)| (hist.bin_center(k), *c as f64)).collect();
    let title = if low { "Signal-idler coincidences" } else { "Signal-UV coincidences" };
    let plot = svg_plot(
        title,
        "delay (ps)",
        "counts per bin",
        false,
        false,
        &[Series {
            label: "histogram".into(),
            points: pts,
        }],
        &stamp(ctx),
    );
    Ok(ScenarioData {
        tables: vec![(String::new(), TableOut::Histogram(hist))],
        plot: Some(plot),
        metrics,
    })
}

fn fock_demo(s: &Scenario, ctx: &RunContext) -> Result<ScenarioData> {
    let kappa = s.kappa.unwrap_or(FOCK_KAPPA);
    let gamma = s.gamma.unwrap_or(FOCK_GAMMA);
    let basis = FockBasis::default();
    let mut t = Table::new(&[
        "pump_amplitude",
        "pair_amplitude",
        "pair_ratio",
        "cascade_amplitude",
        "cascade_ratio",
        "output_photons",
        "g2_so",
        "truncation_limited",
    ]);
    let mut pts = Vec::new();
    let mut worst_pair: f64 = 0.0;
    let mut worst_cascade: f64 = 0.0;
    for &a in &s.amplitudes {
        let params = CouplingParams::new(kappa, gamma, a, 1.0)?;
        let state = cascaded_evolution(basis, &params)?;
        let c = correlation_observables(&state);
        let pair = state.amplitude([1, 1, 0]).norm();
        let cascade = state.amplitude([1, 0, 1]).norm();
        let pair_ratio = pair / (gamma * a);
        let cascade_ratio = cascade / (gamma * kappa * a * a);
        worst_pair = worst_pair.max((pair_ratio - 1.0).abs());
        worst_cascade = worst_cascade.max((cascade_ratio - 1.0).abs());
        let n_out = state.mean_photons(Mode::Output);
        t.push(vec![
            num(a),
            num(pair),
            num(pair_ratio),
            num(cascade),
            num(cascade_ratio),
            num(n_out),
            c.cross_so.value().map_or_else(|| "undefined".into(), num),
            c.truncation_limited.to_string(),
        ]);
        pts.push((a * a, n_out));
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("max_pair_ratio_error".into(), worst_pair);
    metrics.insert("max_cascade_ratio_error".into(), worst_cascade);
    if pts.len() >= 3 {
        metrics.insert("output_power_exponent".into(), power_law_fit(&pts, 0.0)?.exponent);
    }
    let plot = svg_plot(
        "Output photons vs pump power",
        "pump power (A²)",
        "⟨n_o⟩",
        true,
        true,
        &[Series {
            label: "output".into(),
            points: pts,
        }],
        &stamp(ctx),
    );
    Ok(ScenarioData {
        tables: vec![(String::new(), TableOut::Plain(t))],
        plot: Some(plot),
        metrics,
    })
}
