//! Seeded synthetic time-tag streams for the signal, idler and UV detectors.
//!
//! Pair creation is a homogeneous Poisson process with a flat idler
//! spectrum of width `pair_bandwidth_ghz`. Each pair's idler is either
//! converted to the UV with the small-signal probability `η_ss(P)·φ(δ)` or
//! travels on to the IR detector. Losses and filters split the pair stream
//! into independent Poisson classes (signal only, signal+UV, ...), so the
//! generator never draws undetected pairs.
//!
//! Time is cut into fixed slices. Every slice owns ChaCha substreams keyed by
//! slice index and source, so sequential and parallel runs are identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{conversion_efficiency, has_etalon, stack_transmission, wavelength_to_thz, ConverterModel, LossBudget, SpectralFilter};

pub const PS_PER_S: f64 = 1e12;
/// Simulated time per slice.
pub const SLICE_PS: u64 = 10_000_000_000;
const MAX_EXPECTED_EVENTS: f64 = (1u64 << 62) as f64;
const FWHM_TO_SIGMA: f64 = 0.424_660_900_144_009_5;

/// Detector events of one channel, in integer picoseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagStream {
    pub channel: u16,
    pub duration_ps: u64,
    pub timestamps: Vec<u64>,
}

impl TagStream {
    /// Checks that timestamps are sorted and below `duration_ps`.
    pub fn new(channel: u16, duration_ps: u64, timestamps: Vec<u64>) -> Result<Self> {
        if timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::domain(format!("channel {channel}: timestamps not sorted")));
        }
        if let Some(&last) = timestamps.last() {
            if last >= duration_ps {
                return Err(Error::domain(format!(
                    "channel {channel}: tag at {last} ps beyond duration {duration_ps} ps"
                )));
            }
        }
        Ok(Self {
            channel,
            duration_ps,
            timestamps,
        })
    }

    pub fn empty(channel: u16, duration_ps: u64) -> Self {
        Self {
            channel,
            duration_ps,
            timestamps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_ps as f64 / PS_PER_S
    }

    pub fn rate_hz(&self) -> f64 {
        if self.duration_ps == 0 {
            0.0
        } else {
            self.len() as f64 / self.duration_s()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelRole {
    /// SPDC signal near 847 nm.
    Signal,
    /// Unconverted idler or input light near 1311 nm.
    Idler,
    /// Converted output near 369.5 nm.
    Uv,
}

fn default_jitter() -> f64 {
    350.0
}

fn default_dead_time() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub id: u16,
    pub role: ChannelRole,
    #[serde(default)]
    pub filters: Vec<SpectralFilter>,
    pub losses: LossBudget,
    #[serde(default = "default_jitter")]
    pub jitter_fwhm_ps: f64,
    #[serde(default = "default_dead_time")]
    pub dead_time_ns: f64,
    pub dark_count_rate_hz: f64,
    /// Fixed delay added to every tag of this channel.
    #[serde(default)]
    pub offset_ps: i64,
}

impl ChannelConfig {
    pub fn new(id: u16, role: ChannelRole, losses: LossBudget, dark_count_rate_hz: f64) -> Self {
        Self {
            id,
            role,
            filters: Vec::new(),
            losses,
            jitter_fwhm_ps: default_jitter(),
            dead_time_ns: default_dead_time(),
            dark_count_rate_hz,
            offset_ps: 0,
        }
    }

    pub fn with_filters(mut self, filters: Vec<SpectralFilter>) -> Self {
        self.filters = filters;
        self
    }

    /// Detection efficiency for broadband light; spectral shaping, including
    /// an etalon's peak transmission, comes from the filters.
    fn broadband_efficiency(&self) -> f64 {
        self.losses.eta_loss(false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub pump_mw: f64,
    /// Input photon flux in front of the crystal; 0 for noise-only runs.
    pub input_flux_hz: f64,
    pub duration_s: f64,
    pub seed: u64,
    pub channels: Vec<ChannelConfig>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pump_mw >= 0.0 && self.pump_mw.is_finite()) {
            return Err(Error::config(format!("pump power must be >= 0, got {}", self.pump_mw)));
        }
        if !(self.input_flux_hz >= 0.0 && self.input_flux_hz.is_finite()) {
            return Err(Error::config("input flux must be >= 0"));
        }
        if !(self.duration_s >= 0.0 && self.duration_s * PS_PER_S < u64::MAX as f64) {
            return Err(Error::config(format!("invalid duration {} s", self.duration_s)));
        }
        let mut roles = Vec::new();
        let mut ids = Vec::new();
        for c in &self.channels {
            if roles.contains(&c.role) {
                return Err(Error::config(format!("duplicate channel role {:?}", c.role)));
            }
            if ids.contains(&c.id) {
                return Err(Error::config(format!("duplicate channel id {}", c.id)));
            }
            roles.push(c.role);
            ids.push(c.id);
            if !(c.jitter_fwhm_ps >= 0.0 && c.jitter_fwhm_ps.is_finite()) {
                return Err(Error::config("jitter must be >= 0"));
            }
            if !(c.dead_time_ns >= 0.0 && c.dead_time_ns.is_finite()) {
                return Err(Error::config("dead time must be >= 0"));
            }
            if !(c.dark_count_rate_hz >= 0.0 && c.dark_count_rate_hz.is_finite()) {
                return Err(Error::config("dark count rate must be >= 0"));
            }
            c.losses.validate().map_err(|e| Error::config(e.to_string()))?;
            for f in &c.filters {
                f.validate().map_err(|e| Error::config(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn duration_ps(&self) -> u64 {
        (self.duration_s * PS_PER_S).round() as u64
    }

    fn channel(&self, role: ChannelRole) -> Option<(usize, &ChannelConfig)> {
        self.channels.iter().enumerate().find(|(_, c)| c.role == role)
    }
}

/// Poisson rates (Hz) of every event source in a scenario.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EventRates {
    pub signal_only: f64,
    pub idler_only: f64,
    pub uv_only: f64,
    pub signal_idler: f64,
    pub signal_uv: f64,
    pub signal_luminescence: f64,
    pub uv_luminescence: f64,
    pub input_uv: f64,
    pub input_idler: f64,
    /// Dark-count rate per channel, in scenario channel order.
    pub dark: Vec<f64>,
}

impl EventRates {
    /// Singles rate of `role` before dead time.
    pub fn singles(&self, scenario: &ScenarioConfig, role: ChannelRole) -> f64 {
        let Some((idx, _)) = scenario.channel(role) else {
            return 0.0;
        };
        let physical = match role {
            ChannelRole::Signal => self.signal_only + self.signal_idler + self.signal_uv + self.signal_luminescence,
            ChannelRole::Idler => self.idler_only + self.signal_idler + self.input_idler,
            ChannelRole::Uv => self.uv_only + self.signal_uv + self.uv_luminescence + self.input_uv,
        };
        physical + self.dark[idx]
    }

    fn total(&self) -> f64 {
        self.signal_only
            + self.idler_only
            + self.uv_only
            + self.signal_idler
            + self.signal_uv
            + self.signal_luminescence
            + self.uv_luminescence
            + self.input_uv
            + self.input_idler
            + self.dark.iter().sum::<f64>()
    }
}

/// Integrates the pair-class probabilities over the idler band.
pub fn event_rates(scenario: &ScenarioConfig, model: &ConverterModel) -> Result<EventRates> {
    scenario.validate()?;
    model.validate()?;
    let p = scenario.pump_mw;
    let sig = scenario.channel(ChannelRole::Signal).map(|(_, c)| c);
    let idl = scenario.channel(ChannelRole::Idler).map(|(_, c)| c);
    let uv = scenario.channel(ChannelRole::Uv).map(|(_, c)| c);

    let triple = model.triple();
    let nu_s0 = triple.signal_thz();
    let nu_i0 = wavelength_to_thz(model.lambda_input_nm);
    let nu_o0 = triple.output_thz();
    let q0 = model.small_signal_efficiency(p);
    let acceptance = match uv {
        Some(c) if has_etalon(&c.filters) => model.etalon_cascade_acceptance,
        _ => 1.0,
    };

    let mut step = model.noise_bandwidth_ghz / 200.0;
    for c in &scenario.channels {
        for f in &c.filters {
            if f.kind != crate::spectral::FilterKind::Bandpass {
                step = step.min(f.fwhm_ghz / 16.0);
            }
        }
    }
    let half = 0.5 * model.pair_bandwidth_ghz;
    let n = ((2.0 * half / step).ceil() as usize).clamp(2, 4_000_000);
    let h = 2.0 * half / n as f64;

    let mut acc = [0.0f64; 7];
    for k in 0..=n {
        let d = -half + k as f64 * h;
        let w = if k == 0 || k == n { 0.5 * h } else { h };
        let t_s = sig.map_or(0.0, |c| c.broadband_efficiency() * stack_transmission(&c.filters, nu_s0 - d * 1e-3));
        let q = q0 * model.phasematching_lineshape(d);
        let t_u = uv.map_or(0.0, |c| c.broadband_efficiency() * stack_transmission(&c.filters, nu_o0 + d * 1e-3));
        let t_i = idl.map_or(0.0, |c| c.broadband_efficiency() * stack_transmission(&c.filters, nu_i0 + d * 1e-3));
        let p_u = q * t_u * acceptance;
        let p_i = (1.0 - q) * t_i;
        acc[0] += w * t_s * (1.0 - p_u - p_i);
        acc[1] += w * (1.0 - t_s) * p_i;
        acc[2] += w * (1.0 - t_s) * p_u;
        acc[3] += w * t_s * p_i;
        acc[4] += w * t_s * p_u;
        acc[5] += w * t_s;
        acc[6] += w * t_u;
    }
    let pair = model.pair_rate_density * p;
    let coupling = uv.or(idl).map_or_else(unit_losses, |c| c.losses);
    let eta_ext = conversion_efficiency(p, model, false, &coupling)?;
    let flux = scenario.input_flux_hz;
    Ok(EventRates {
        signal_only: pair * acc[0],
        idler_only: pair * acc[1],
        uv_only: pair * acc[2],
        signal_idler: pair * acc[3],
        signal_uv: pair * acc[4],
        signal_luminescence: model.signal_luminescence_density * p * acc[5],
        uv_luminescence: model.uv_luminescence_density * p * acc[6],
        input_uv: uv.map_or(0.0, |c| flux * eta_ext * c.losses.eta_loss(has_etalon(&c.filters))),
        input_idler: idl.map_or(0.0, |c| {
            flux * (1.0 - eta_ext) * c.broadband_efficiency() * stack_transmission(&c.filters, nu_i0)
        }),
        dark: scenario.channels.iter().map(|c| c.dark_count_rate_hz).collect(),
    })
}

fn unit_losses() -> LossBudget {
    LossBudget {
        external_optics: 1.0,
        fiber_coupling: 1.0,
        detector_efficiency: 1.0,
        etalon_transmission: 1.0,
        mode_matching: 1.0,
    }
}

/// SplitMix64 finaliser, used to derive independent sub-seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Clone, Copy)]
enum Source {
    Pairs = 1,
    Luminescence = 2,
    Input = 3,
    Dark = 4,
}

fn substream(seed: u64, source: Source, slice: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(seed ^ splitmix64(source as u64)));
    rng.set_stream(slice);
    rng
}

fn poisson(rng: &mut ChaCha12Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// Per-channel timing model applied to every physical event.
#[derive(Clone, Copy)]
struct Timing {
    offset_ps: f64,
    jitter: Option<Normal<f64>>,
}

impl Timing {
    fn of(c: &ChannelConfig) -> Self {
        let sigma = c.jitter_fwhm_ps * FWHM_TO_SIGMA;
        Self {
            offset_ps: c.offset_ps as f64,
            jitter: (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma")),
        }
    }

    fn place(&self, t: f64, rng: &mut ChaCha12Rng) -> f64 {
        let j = self.jitter.map_or(0.0, |n| n.sample(rng));
        t + self.offset_ps + j
    }
}

struct SlicePlan<'a> {
    scenario: &'a ScenarioConfig,
    rates: &'a EventRates,
    timing: Vec<Timing>,
    sig: Option<usize>,
    idl: Option<usize>,
    uv: Option<usize>,
    duration_ps: u64,
}

impl SlicePlan<'_> {
    /// Raw (unsorted, jittered) tags of one slice, one vector per channel.
    fn generate(&self, slice: u64) -> Vec<Vec<f64>> {
        let seed = self.scenario.seed;
        let t0 = (slice * SLICE_PS) as f64;
        let t1 = ((slice + 1) * SLICE_PS).min(self.duration_ps) as f64;
        let span_s = (t1 - t0) / PS_PER_S;
        let mut out = vec![Vec::new(); self.scenario.channels.len()];
        let r = self.rates;

        let emit = |rng: &mut ChaCha12Rng, rate: f64, targets: &[Option<usize>], out: &mut Vec<Vec<f64>>| {
            for _ in 0..poisson(rng, rate * span_s) {
                let t = rng.random_range(t0..t1);
                for ch in targets.iter().flatten() {
                    let placed = self.timing[*ch].place(t, rng);
                    out[*ch].push(placed);
                }
            }
        };

        let mut rng = substream(seed, Source::Pairs, slice);
        emit(&mut rng, r.signal_only, &[self.sig], &mut out);
        emit(&mut rng, r.idler_only, &[self.idl], &mut out);
        emit(&mut rng, r.uv_only, &[self.uv], &mut out);
        emit(&mut rng, r.signal_idler, &[self.sig, self.idl], &mut out);
        emit(&mut rng, r.signal_uv, &[self.sig, self.uv], &mut out);

        let mut rng = substream(seed, Source::Luminescence, slice);
        emit(&mut rng, r.signal_luminescence, &[self.sig], &mut out);
        emit(&mut rng, r.uv_luminescence, &[self.uv], &mut out);

        let mut rng = substream(seed, Source::Input, slice);
        emit(&mut rng, r.input_uv, &[self.uv], &mut out);
        emit(&mut rng, r.input_idler, &[self.idl], &mut out);

        // darks are not jittered: they carry no optical timing
        let mut rng = substream(seed, Source::Dark, slice);
        for (ch, &rate) in r.dark.iter().enumerate() {
            for _ in 0..poisson(&mut rng, rate * span_s) {
                out[ch].push(rng.random_range(t0..t1));
            }
        }
        out
    }
}

/// Drops tags closer than `dead_ps` to the previously accepted tag.
pub fn apply_dead_time(sorted: &[u64], dead_ps: u64) -> Vec<u64> {
    if dead_ps == 0 {
        return sorted.to_vec();
    }
    let mut out = Vec::with_capacity(sorted.len());
    let mut last: Option<u64> = None;
    for &t in sorted {
        if last.is_none_or(|l| t - l >= dead_ps) {
            out.push(t);
            last = Some(t);
        }
    }
    out
}

/// Generates one stream per configured channel, in configuration order.
pub fn generate_streams(scenario: &ScenarioConfig, model: &ConverterModel) -> Result<Vec<TagStream>> {
    generate_streams_with(scenario, model, true)
}

/// As [`generate_streams`]; `parallel = false` forces a single thread.
/// Both paths produce identical output.
pub fn generate_streams_with(scenario: &ScenarioConfig, model: &ConverterModel, parallel: bool) -> Result<Vec<TagStream>> {
    let rates = event_rates(scenario, model)?;
    let duration_ps = scenario.duration_ps();
    let expected = rates.total() * scenario.duration_s;
    if !(expected <= MAX_EXPECTED_EVENTS) {
        return Err(Error::config(format!(
            "scenario expects {expected:.3e} events, above the 2^62 limit"
        )));
    }
    let plan = SlicePlan {
        scenario,
        rates: &rates,
        timing: scenario.channels.iter().map(Timing::of).collect(),
        sig: scenario.channel(ChannelRole::Signal).map(|(i, _)| i),
        idl: scenario.channel(ChannelRole::Idler).map(|(i, _)| i),
        uv: scenario.channel(ChannelRole::Uv).map(|(i, _)| i),
        duration_ps,
    };
    let n_slices = duration_ps.div_ceil(SLICE_PS);
    let slices: Vec<Vec<Vec<f64>>> = if parallel {
        (0..n_slices).into_par_iter().map(|s| plan.generate(s)).collect()
    } else {
        (0..n_slices).map(|s| plan.generate(s)).collect()
    };

    let finish = |ch: usize| {
        let mut tags: Vec<u64> = slices
            .iter()
            .flat_map(|s| s[ch].iter())
            .filter_map(|&t| {
                let t = t.round();
                (t >= 0.0 && t < duration_ps as f64).then_some(t as u64)
            })
            .collect();
        tags.sort_unstable();
        let c = &scenario.channels[ch];
        let dead_ps = (c.dead_time_ns * 1e3).round() as u64;
        TagStream {
            channel: c.id,
            duration_ps,
            timestamps: apply_dead_time(&tags, dead_ps),
        }
    };
    Ok(if parallel {
        (0..scenario.channels.len()).into_par_iter().map(finish).collect()
    } else {
        (0..scenario.channels.len()).map(finish).collect()
    })
}

/// Keeps each tag independently with probability `transmission`.
pub fn thin_stream(stream: &TagStream, transmission: f64, seed: u64) -> Result<TagStream> {
    if !(0.0..=1.0).contains(&transmission) {
        return Err(Error::domain(format!("transmission {transmission} outside [0, 1]")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(seed));
    let timestamps = stream
        .timestamps
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < transmission)
        .collect();
    Ok(TagStream {
        channel: stream.channel,
        duration_ps: stream.duration_ps,
        timestamps,
    })
}

/// Sorted merge of two streams of the same channel; ties keep `a` first.
pub fn merge_streams(a: &TagStream, b: &TagStream) -> Result<TagStream> {
    if a.channel != b.channel {
        return Err(Error::domain(format!(
            "cannot merge channel {} into channel {}",
            b.channel, a.channel
        )));
    }
    let (x, y) = (&a.timestamps, &b.timestamps);
    let mut out = Vec::with_capacity(x.len() + y.len());
    let (mut i, mut j) = (0, 0);
    while i < x.len() && j < y.len() {
        if x[i] <= y[j] {
            out.push(x[i]);
            i += 1;
        } else {
            out.push(y[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&x[i..]);
    out.extend_from_slice(&y[j..]);
    Ok(TagStream {
        channel: a.channel,
        duration_ps: a.duration_ps.max(b.duration_ps),
        timestamps: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::DeviceConfig;

    fn dark_only(duration_s: f64) -> (ScenarioConfig, ConverterModel) {
        let cfg = DeviceConfig::bundled();
        let ch = ChannelConfig::new(2, ChannelRole::Uv, cfg.losses, 13.0);
        (
            ScenarioConfig {
                pump_mw: 0.0,
                input_flux_hz: 0.0,
                duration_s,
                seed: 7,
                channels: vec![ch],
            },
            cfg.model,
        )
    }

    #[test]
    fn dark_only_count_is_poisson() {
        let (s, m) = dark_only(10.0);
        let out = generate_streams(&s, &m).unwrap();
        let n = out[0].len() as f64;
        assert!((n - 130.0).abs() < 5.0 * 130f64.sqrt(), "{n}");
    }

    #[test]
    fn zero_duration_gives_empty_streams() {
        let (s, m) = dark_only(0.0);
        let out = generate_streams(&s, &m).unwrap();
        assert!(out.iter().all(TagStream::is_empty));
    }

    #[test]
    fn overflow_guard() {
        let (mut s, m) = dark_only(1e6);
        s.channels[0].dark_count_rate_hz = 1e13;
        assert!(matches!(generate_streams(&s, &m), Err(Error::Config(_))));
    }

    #[test]
    fn dead_time_filter() {
        assert_eq!(apply_dead_time(&[0, 10, 49, 50, 120, 169, 170], 50), vec![0, 50, 120, 170]);
    }

    #[test]
    fn merge_rejects_mismatched_channels() {
        let a = TagStream::empty(0, 10);
        let b = TagStream::empty(1, 10);
        assert!(merge_streams(&a, &b).is_err());
    }

    #[test]
    fn merge_is_stable() {
        let a = TagStream::new(0, 100, vec![1, 5, 5, 9]).unwrap();
        let b = TagStream::new(0, 100, vec![0, 5, 10]).unwrap();
        let m = merge_streams(&a, &b).unwrap();
        assert_eq!(m.timestamps, vec![0, 1, 5, 5, 5, 9, 10]);
    }

    #[test]
    fn thin_extremes() {
        let s = TagStream::new(1, 1000, (0..500).collect()).unwrap();
        assert_eq!(thin_stream(&s, 1.0, 3).unwrap(), s);
        assert!(thin_stream(&s, 0.0, 3).unwrap().is_empty());
        assert!(thin_stream(&s, 1.5, 3).is_err());
    }
}
