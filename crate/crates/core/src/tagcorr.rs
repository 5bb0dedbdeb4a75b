//! Time-tag correlation analysis.
//!
//! Conventions: `τ = t_b − t_a`; bins are half-open `[lower, upper)`, so a
//! delay equal to the range maximum is not counted. Histograms are never
//! symmetrised.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::montecarlo::TagStream;
use crate::spectral::LossBudget;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoincidenceHistogram {
    pub bin_width_ps: u64,
    pub tau_min_ps: i64,
    pub tau_max_ps: i64,
    pub counts: Vec<u64>,
    pub acquisition_time_s: f64,
    /// Total tags in the `a` and `b` streams.
    pub singles: (u64, u64),
}

impl CoincidenceHistogram {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_lower(&self, k: usize) -> i64 {
        self.tau_min_ps + (k as i64) * self.bin_width_ps as i64
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        self.bin_lower(k) as f64 + 0.5 * self.bin_width_ps as f64
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Bin holding delay `tau`, if inside the range.
    pub fn bin_of(&self, tau: i64) -> Option<usize> {
        (tau >= self.tau_min_ps && tau < self.tau_max_ps)
            .then(|| ((tau - self.tau_min_ps) as u64 / self.bin_width_ps) as usize)
    }

    /// Element-wise sum of two histograms with identical binning.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if (self.bin_width_ps, self.tau_min_ps, self.tau_max_ps) != (other.bin_width_ps, other.tau_min_ps, other.tau_max_ps) {
            return Err(Error::domain("histograms have different binning"));
        }
        Ok(Self {
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
            acquisition_time_s: self.acquisition_time_s + other.acquisition_time_s,
            singles: (self.singles.0 + other.singles.0, self.singles.1 + other.singles.1),
            ..self.clone()
        })
    }
}

fn check_binning(bin_width_ps: u64, tau_range: (i64, i64)) -> Result<usize> {
    let (lo, hi) = tau_range;
    if bin_width_ps == 0 {
        return Err(Error::domain("bin width must be positive"));
    }
    if hi <= lo {
        return Err(Error::domain(format!("degenerate τ range [{lo}, {hi})")));
    }
    let span = (hi as i128 - lo as i128) as u128;
    if !span.is_multiple_of(bin_width_ps as u128) {
        return Err(Error::domain(format!(
            "τ range of {span} ps is not a whole number of {bin_width_ps} ps bins"
        )));
    }
    let n = (span / bin_width_ps as u128) as usize;
    if n < 3 {
        return Err(Error::domain("τ range must span at least 3 bins"));
    }
    Ok(n)
}

fn check_sorted(s: &TagStream) -> Result<()> {
    if s.timestamps.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::domain(format!("channel {} is not sorted", s.channel)));
    }
    if s.timestamps.last().is_some_and(|&t| t > i64::MAX as u64) {
        return Err(Error::domain("timestamps beyond 2^63 ps are not supported"));
    }
    Ok(())
}

/// Accumulates `τ = b − a` for the `a` tags in `a_tags` into `counts`.
/// `b` must hold every `b` tag within the τ range of `a_tags`.
fn accumulate(a_tags: &[u64], b: &[u64], bin: u64, lo: i64, hi: i64, counts: &mut [u64]) {
    let Some(&first) = a_tags.first() else {
        return;
    };
    let start = |t: u64| (t as i64).saturating_add(lo);
    let s0 = start(first);
    let mut j0 = b.partition_point(|&x| (x as i64) < s0);
    for &ta in a_tags {
        let ta = ta as i64;
        let lower = ta.saturating_add(lo);
        while j0 < b.len() && (b[j0] as i64) < lower {
            j0 += 1;
        }
        let upper = ta.saturating_add(hi);
        let mut j = j0;
        while j < b.len() {
            let tb = b[j] as i64;
            if tb >= upper {
                break;
            }
            let k = ((tb - ta - lo) as u64 / bin) as usize;
            counts[k] += 1;
            j += 1;
        }
    }
}

fn acquisition_time(a: &TagStream, b: &TagStream) -> f64 {
    a.duration_s().max(b.duration_s())
}

/// Streaming two-pointer histogram of `τ = t_b − t_a` over every ordered
/// pair of tags. Cost is linear in tags plus matches.
pub fn coincidence_histogram(a: &TagStream, b: &TagStream, bin_width_ps: u64, tau_range: (i64, i64)) -> Result<CoincidenceHistogram> {
    let n = check_binning(bin_width_ps, tau_range)?;
    check_sorted(a)?;
    check_sorted(b)?;
    let mut counts = vec![0u64; n];
    accumulate(&a.timestamps, &b.timestamps, bin_width_ps, tau_range.0, tau_range.1, &mut counts);
    Ok(CoincidenceHistogram {
        bin_width_ps,
        tau_min_ps: tau_range.0,
        tau_max_ps: tau_range.1,
        counts,
        acquisition_time_s: acquisition_time(a, b),
        singles: (a.len() as u64, b.len() as u64),
    })
}

/// Same result as [`coincidence_histogram`], computed over `slices` time
/// slices of `a` in parallel. Each slice reads `b` over its own time span
/// widened by the τ range, then the partial histograms are summed.
pub fn coincidence_histogram_parallel(
    a: &TagStream,
    b: &TagStream,
    bin_width_ps: u64,
    tau_range: (i64, i64),
    slices: usize,
) -> Result<CoincidenceHistogram> {
    let n = check_binning(bin_width_ps, tau_range)?;
    check_sorted(a)?;
    check_sorted(b)?;
    let slices = slices.max(1);
    let span = a.duration_ps.max(b.duration_ps).max(a.timestamps.last().map_or(0, |t| t + 1));
    let width = span.div_ceil(slices as u64).max(1);
    let (lo, hi) = tau_range;
    let partials: Vec<Vec<u64>> = (0..slices as u64)
        .into_par_iter()
        .map(|s| {
            let t0 = s * width;
            let t1 = t0.saturating_add(width);
            let i0 = a.timestamps.partition_point(|&t| t < t0);
            let i1 = a.timestamps.partition_point(|&t| t < t1);
            // b window with the overlap margin of the τ range
            let b0 = (t0 as i64).saturating_add(lo);
            let b1 = (t1 as i64).saturating_add(hi);
            let j0 = b.timestamps.partition_point(|&t| (t as i64) < b0);
            let j1 = b.timestamps.partition_point(|&t| (t as i64) < b1);
            let mut counts = vec![0u64; n];
            accumulate(&a.timestamps[i0..i1], &b.timestamps[j0..j1], bin_width_ps, lo, hi, &mut counts);
            counts
        })
        .collect();
    let mut counts = vec![0u64; n];
    for p in partials {
        for (c, v) in counts.iter_mut().zip(p) {
            *c += v;
        }
    }
    Ok(CoincidenceHistogram {
        bin_width_ps,
        tau_min_ps: lo,
        tau_max_ps: hi,
        counts,
        acquisition_time_s: acquisition_time(a, b),
        singles: (a.len() as u64, b.len() as u64),
    })
}

/// Histogram of `τ = t_j − t_i` over distinct tags `i < j` of one stream,
/// so only `τ ≥ 0` is populated and self-pairs are excluded. Dead-time
/// notches near zero are left in place.
pub fn auto_correlation_histogram(a: &TagStream, bin_width_ps: u64, tau_range: (i64, i64)) -> Result<CoincidenceHistogram> {
    let n = check_binning(bin_width_ps, tau_range)?;
    check_sorted(a)?;
    let (lo, hi) = tau_range;
    let mut counts = vec![0u64; n];
    let t = &a.timestamps;
    for i in 0..t.len() {
        for &tj in &t[i + 1..] {
            let tau = (tj - t[i]) as i64;
            if tau >= hi {
                break;
            }
            if tau >= lo {
                counts[((tau - lo) as u64 / bin_width_ps) as usize] += 1;
            }
        }
    }
    Ok(CoincidenceHistogram {
        bin_width_ps,
        tau_min_ps: lo,
        tau_max_ps: hi,
        counts,
        acquisition_time_s: a.duration_s(),
        singles: (a.len() as u64, a.len() as u64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationResult {
    pub g2: f64,
    pub sigma: f64,
    /// τ window treated as the peak, `[lower, upper)` in ps.
    pub peak_window_ps: (i64, i64),
    pub peak_bin_count: usize,
    pub baseline_bin_count: usize,
    pub peak_counts: u64,
    pub baseline_counts: u64,
}

fn in_window(hist: &CoincidenceHistogram, k: usize, w: (i64, i64)) -> bool {
    let c = hist.bin_center(k);
    c >= w.0 as f64 && c < w.1 as f64
}

/// `g² = mean(peak bins)/mean(baseline bins)` with Poisson uncertainty
/// `g²·√(1/C_peak + 1/C_base)`.
///
/// Bins whose centre lies in `peak_window` form the peak. With
/// `baseline_exclusion_ps = None` every other bin is baseline; otherwise
/// only bins whose centre is farther than that from the window centre.
pub fn g2_with_baseline(
    hist: &CoincidenceHistogram,
    peak_window: (i64, i64),
    baseline_exclusion_ps: Option<f64>,
) -> Result<CorrelationResult> {
    if peak_window.1 <= peak_window.0 {
        return Err(Error::domain("empty peak window"));
    }
    if peak_window.0 < hist.tau_min_ps || peak_window.1 > hist.tau_max_ps {
        return Err(Error::domain("peak window outside the histogram range"));
    }
    let mid = 0.5 * (peak_window.0 as f64 + peak_window.1 as f64);
    let (mut cp, mut np, mut cb, mut nb) = (0u64, 0usize, 0u64, 0usize);
    for (k, &c) in hist.counts.iter().enumerate() {
        if in_window(hist, k, peak_window) {
            cp += c;
            np += 1;
        } else if baseline_exclusion_ps.is_none_or(|ex| (hist.bin_center(k) - mid).abs() > ex) {
            cb += c;
            nb += 1;
        }
    }
    if np == 0 {
        return Err(Error::domain("peak window contains no bin centre"));
    }
    if nb == 0 {
        return Err(Error::domain("no baseline bins outside the peak window"));
    }
    if cb == 0 {
        return Err(Error::UndefinedCorrelation("baseline holds zero coincidences".into()));
    }
    let base_mean = cb as f64 / nb as f64;
    let g2 = (cp as f64 / np as f64) / base_mean;
    let sigma = if cp > 0 {
        g2 * (1.0 / cp as f64 + 1.0 / cb as f64).sqrt()
    } else {
        // one-count upper scale when the peak is empty
        1.0 / np as f64 / base_mean
    };
    Ok(CorrelationResult {
        g2,
        sigma,
        peak_window_ps: peak_window,
        peak_bin_count: np,
        baseline_bin_count: nb,
        peak_counts: cp,
        baseline_counts: cb,
    })
}

/// [`g2_with_baseline`] using every bin outside the window as baseline.
pub fn g2_from_histogram(hist: &CoincidenceHistogram, peak_window: (i64, i64)) -> Result<CorrelationResult> {
    g2_with_baseline(hist, peak_window, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PeakMode {
    /// Contiguous bins at or above half the peak height over the background.
    Fwhm,
    /// The single highest bin.
    MaxBin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeakSelection {
    pub window_ps: (i64, i64),
    pub fwhm_ps: f64,
    pub center_ps: f64,
    /// True when the FWHM search collapsed to the single maximum bin.
    pub fallback: bool,
}

fn median(v: &[u64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_unstable();
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2]) as f64
    }
}

/// Locates the coincidence peak.
pub fn select_peak(hist: &CoincidenceHistogram, mode: PeakMode) -> Result<PeakSelection> {
    let (kmax, &cmax) = hist
        .counts
        .iter()
        .enumerate()
        .max_by_key(|&(k, &c)| (c, std::cmp::Reverse(k)))
        .ok_or_else(|| Error::domain("empty histogram"))?;
    if cmax == 0 {
        return Err(Error::UndefinedCorrelation("histogram holds no coincidences".into()));
    }
    let w = hist.bin_width_ps as i64;
    let single = PeakSelection {
        window_ps: (hist.bin_lower(kmax), hist.bin_lower(kmax) + w),
        fwhm_ps: w as f64,
        center_ps: hist.bin_center(kmax),
        fallback: true,
    };
    if mode == PeakMode::MaxBin {
        return Ok(PeakSelection { fallback: false, ..single });
    }
    let background = median(&hist.counts);
    let half = background + 0.5 * (cmax as f64 - background);
    let (mut k0, mut k1) = (kmax, kmax);
    while k0 > 0 && hist.counts[k0 - 1] as f64 >= half {
        k0 -= 1;
    }
    while k1 + 1 < hist.n_bins() && hist.counts[k1 + 1] as f64 >= half {
        k1 += 1;
    }
    if k0 == k1 {
        return Ok(single);
    }
    let lower = hist.bin_lower(k0);
    let upper = hist.bin_lower(k1) + w;
    Ok(PeakSelection {
        window_ps: (lower, upper),
        fwhm_ps: (upper - lower) as f64,
        center_ps: 0.5 * (lower + upper) as f64,
        fallback: false,
    })
}

/// Baseline bins lie farther than this many FWHM from the peak centre.
pub const BASELINE_EXCLUSION_FWHM: f64 = 5.0;

/// Peak selection plus g² with the default baseline rule.
pub fn g2_auto(hist: &CoincidenceHistogram, mode: PeakMode) -> Result<(CorrelationResult, PeakSelection)> {
    let peak = select_peak(hist, mode)?;
    let r = g2_with_baseline(hist, peak.window_ps, Some(BASELINE_EXCLUSION_FWHM * peak.fwhm_ps))?;
    Ok((r, peak))
}

/// Thermal-state bound on each auto-correlation.
pub const THERMAL_AUTO: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CauchySchwarz {
    pub bound: f64,
    /// Strict: `g² > bound`.
    pub violated: bool,
    pub sigma_violation: f64,
}

/// Tests `g²_ab ≤ √(g²_a·g²_b)`.
pub fn cauchy_schwarz_test(cross: &CorrelationResult, auto_a: f64, auto_b: f64) -> Result<CauchySchwarz> {
    if !(cross.sigma > 0.0) {
        return Err(Error::domain("cross-correlation sigma must be positive"));
    }
    if !(auto_a > 0.0 && auto_b > 0.0) {
        return Err(Error::domain("auto-correlations must be positive"));
    }
    let bound = (auto_a * auto_b).sqrt();
    Ok(CauchySchwarz {
        bound,
        violated: cross.g2 > bound,
        sigma_violation: (cross.g2 - bound) / cross.sigma,
    })
}

/// True rate behind a stream recorded with a non-paralysable dead time:
/// `R = m/(1 − m·τ)`.
pub fn dead_time_corrected_rate(stream: &TagStream, dead_time_ns: f64) -> Result<f64> {
    if stream.duration_ps == 0 {
        return Err(Error::domain("stream has zero duration"));
    }
    if !(dead_time_ns >= 0.0 && dead_time_ns.is_finite()) {
        return Err(Error::domain(format!("dead time must be >= 0, got {dead_time_ns}")));
    }
    let m = stream.rate_hz();
    let busy = m * dead_time_ns * 1e-9;
    if busy >= 1.0 {
        return Err(Error::domain(format!("detector saturated: busy fraction {busy:.3}")));
    }
    Ok(m / (1.0 - busy))
}

/// Count rate source for [`rate_metrics`].
#[derive(Debug, Clone, Copy)]
pub enum RateInput<'a> {
    Stream(&'a TagStream),
    Rate(f64),
}

impl RateInput<'_> {
    fn hz(&self) -> Result<f64> {
        match *self {
            RateInput::Stream(s) => {
                if s.duration_ps == 0 {
                    Err(Error::domain("stream has zero duration"))
                } else {
                    Ok(s.rate_hz())
                }
            }
            RateInput::Rate(r) if r >= 0.0 && r.is_finite() => Ok(r),
            RateInput::Rate(r) => Err(Error::domain(format!("invalid rate {r}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateMetrics {
    /// Rate with input light.
    pub s_hz: f64,
    /// Rate without input light.
    pub n_hz: f64,
    /// `S/N`, the total rate with input over the noise rate.
    pub snr: f64,
    pub eta_ext: f64,
    pub eta_int: f64,
    /// Set when `S < N` and the efficiencies were clamped to zero.
    pub low_signal: bool,
}

/// `η_ext = (S − N)/(I·η_loss)`, `η_int = η_ext/mode_matching`.
pub fn rate_metrics(
    with_input: RateInput<'_>,
    without_input: RateInput<'_>,
    flux_hz: f64,
    losses: &LossBudget,
    with_etalon: bool,
    mode_matching: f64,
) -> Result<RateMetrics> {
    let s = with_input.hz()?;
    let n = without_input.hz()?;
    if !(flux_hz > 0.0) {
        return Err(Error::domain("input flux must be positive"));
    }
    if !(n > 0.0) {
        return Err(Error::domain("noise rate must be positive for an SNR"));
    }
    if !(mode_matching > 0.0 && mode_matching <= 1.0) {
        return Err(Error::domain("mode matching must lie in (0, 1]"));
    }
    let low_signal = s < n;
    let eta_ext = if low_signal {
        0.0
    } else {
        ((s - n) / (flux_hz * losses.eta_loss(with_etalon))).min(1.0)
    };
    Ok(RateMetrics {
        s_hz: s,
        n_hz: n,
        snr: s / n,
        eta_ext,
        eta_int: (eta_ext / mode_matching).min(1.0),
        low_signal,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    /// Standard error of the exponent.
    pub uncertainty: f64,
    pub prefactor: f64,
    pub used_points: usize,
    /// Points whose floor-subtracted value was not positive.
    pub dropped_points: Vec<(f64, f64)>,
}

/// Least-squares line through `ln(rate − floor)` vs `ln(power)`.
pub fn power_law_fit(points: &[(f64, f64)], subtract_floor: f64) -> Result<PowerLawFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut dropped = Vec::new();
    for &(p, r) in points {
        if !(p > 0.0) {
            return Err(Error::Fit(format!("power {p} must be positive")));
        }
        let v = r - subtract_floor;
        if v > 0.0 && v.is_finite() {
            xs.push(p.ln());
            ys.push(v.ln());
        } else {
            dropped.push((p, r));
        }
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::Fit(format!("{n} usable points, need at least 3")));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("all powers are identical".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let uncertainty = if n > 2 { (rss / (nf - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(PowerLawFit {
        exponent: slope,
        uncertainty,
        prefactor: intercept.exp(),
        used_points: n,
        dropped_points: dropped,
    })
}

/// Writes a histogram as CSV with `#` metadata lines.
pub fn write_histogram_csv<W: Write>(hist: &CoincidenceHistogram, config_hash: &str, mut out: W) -> Result<()> {
    writeln!(out, "# tool_version={}", crate::VERSION)?;
    writeln!(out, "# config_hash={config_hash}")?;
    writeln!(out, "# bin_width_ps={}", hist.bin_width_ps)?;
    writeln!(out, "# tau_range_ps={},{}", hist.tau_min_ps, hist.tau_max_ps)?;
    writeln!(out, "# acquisition_time_s={:?}", hist.acquisition_time_s)?;
    writeln!(out, "# singles={},{}", hist.singles.0, hist.singles.1)?;
    writeln!(out, "bin_lower_ps,bin_upper_ps,counts")?;
    for (k, c) in hist.counts.iter().enumerate() {
        let lo = hist.bin_lower(k);
        writeln!(out, "{},{},{}", lo, lo + hist.bin_width_ps as i64, c)?;
    }
    Ok(())
}

/// Reads back [`write_histogram_csv`] output. Returns the histogram and the
/// embedded config hash.
pub fn read_histogram_csv<R: BufRead>(input: R) -> Result<(CoincidenceHistogram, String)> {
    let bad = |m: &str| Error::Format(format!("histogram csv: {m}"));
    let mut hash = String::new();
    let mut bin = None;
    let mut range = None;
    let mut time = None;
    let mut singles = None;
    let mut counts = Vec::new();
    for line in input.lines() {
        let line = line?;
        if let Some(meta) = line.strip_prefix("# ") {
            let (k, v) = meta.split_once('=').ok_or_else(|| bad("bad metadata line"))?;
            let pair = |v: &str| -> Result<(i64, i64)> {
                let (a, b) = v.split_once(',').ok_or_else(|| bad("expected a pair"))?;
                Ok((a.parse().map_err(|_| bad("int"))?, b.parse().map_err(|_| bad("int"))?))
            };
            match k {
                "config_hash" => hash = v.to_string(),
                "bin_width_ps" => bin = Some(v.parse::<u64>().map_err(|_| bad("bin width"))?),
                "tau_range_ps" => range = Some(pair(v)?),
                "acquisition_time_s" => time = Some(v.parse::<f64>().map_err(|_| bad("time"))?),
                "singles" => singles = Some(pair(v)?),
                _ => {}
            }
        } else if line.starts_with("bin_lower_ps") || line.trim().is_empty() {
            continue;
        } else {
            let c = line.rsplit(',').next().ok_or_else(|| bad("row"))?;
            counts.push(c.parse::<u64>().map_err(|_| bad("count"))?);
        }
    }
    let (bin, range) = (bin.ok_or_else(|| bad("missing bin width"))?, range.ok_or_else(|| bad("missing range"))?);
    let n = check_binning(bin, range)?;
    if n != counts.len() {
        return Err(bad("row count does not match the range"));
    }
    let singles = singles.ok_or_else(|| bad("missing singles"))?;
    Ok((
        CoincidenceHistogram {
            bin_width_ps: bin,
            tau_min_ps: range.0,
            tau_max_ps: range.1,
            counts,
            acquisition_time_s: time.ok_or_else(|| bad("missing time"))?,
            singles: (singles.0 as u64, singles.1 as u64),
        },
        hash,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(ts: Vec<u64>) -> TagStream {
        let d = ts.last().map_or(1, |t| t + 1);
        TagStream::new(0, d, ts).unwrap()
    }

    #[test]
    fn single_pair_example() {
        let h = coincidence_histogram(&stream(vec![0]), &stream(vec![100]), 165, (-825, 825)).unwrap();
        assert_eq!(h.total(), 1);
        assert_eq!(h.counts[h.bin_of(100).unwrap()], 1);
    }

    #[test]
    fn identical_streams_put_self_pairs_in_zero_bin() {
        let s = stream(vec![10, 2000, 5000]);
        let h = coincidence_histogram(&s, &s, 100, (-300, 300)).unwrap();
        assert_eq!(h.counts[h.bin_of(0).unwrap()], 3);
        assert_eq!(h.total(), 3);
    }

    #[test]
    fn range_maximum_is_excluded() {
        let h = coincidence_histogram(&stream(vec![0]), &stream(vec![300]), 100, (-300, 300)).unwrap();
        assert_eq!(h.total(), 0);
        let h = coincidence_histogram(&stream(vec![300]), &stream(vec![0]), 100, (-300, 300)).unwrap();
        assert_eq!(h.counts[0], 1);
    }

    #[test]
    fn binning_errors() {
        let s = stream(vec![1]);
        assert!(coincidence_histogram(&s, &s, 0, (-10, 10)).is_err());
        assert!(coincidence_histogram(&s, &s, 10, (10, 10)).is_err());
        assert!(coincidence_histogram(&s, &s, 10, (-10, 10)).is_err());
        assert!(coincidence_histogram(&s, &s, 7, (-10, 10)).is_err());
        let unsorted = TagStream {
            channel: 0,
            duration_ps: 10,
            timestamps: vec![5, 1],
        };
        assert!(coincidence_histogram(&unsorted, &s, 1, (-3, 3)).is_err());
    }

    #[test]
    fn g2_arithmetic_example() {
        let mut counts = vec![10u64; 11];
        counts[5] = 50;
        let h = CoincidenceHistogram {
            bin_width_ps: 100,
            tau_min_ps: -550,
            tau_max_ps: 550,
            counts,
            acquisition_time_s: 1.0,
            singles: (0, 0),
        };
        let r = g2_from_histogram(&h, (-50, 50)).unwrap();
        assert!((r.g2 - 5.0).abs() < 1e-12);
        let expect = 5.0 * (1.0f64 / 50.0 + 1.0 / 100.0).sqrt();
        assert!((r.sigma - expect).abs() < 1e-12);
        assert!((r.sigma - 0.87).abs() < 0.01);
        assert_eq!(r.baseline_bin_count, 10);
    }

    #[test]
    fn zero_baseline_is_undefined() {
        let mut counts = vec![0u64; 5];
        counts[2] = 4;
        let h = CoincidenceHistogram {
            bin_width_ps: 10,
            tau_min_ps: -25,
            tau_max_ps: 25,
            counts,
            acquisition_time_s: 1.0,
            singles: (0, 0),
        };
        assert!(matches!(g2_from_histogram(&h, (-5, 5)), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn cauchy_schwarz_examples() {
        let r = |g2: f64, sigma: f64| CorrelationResult {
            g2,
            sigma,
            peak_window_ps: (0, 1),
            peak_bin_count: 1,
            baseline_bin_count: 1,
            peak_counts: 1,
            baseline_counts: 1,
        };
        let t = cauchy_schwarz_test(&r(4.9, 0.5), 2.0, 2.0).unwrap();
        assert!(t.violated && (t.sigma_violation - 5.8).abs() < 1e-12);
        assert!(!cauchy_schwarz_test(&r(1.0, 0.1), 2.0, 2.0).unwrap().violated);
        assert!(!cauchy_schwarz_test(&r(2.0, 0.1), 2.0, 2.0).unwrap().violated);
        assert!(cauchy_schwarz_test(&r(3.0, 0.0), 2.0, 2.0).is_err());
    }

    #[test]
    fn rate_metric_examples() {
        let l = LossBudget {
            external_optics: 1.0,
            fiber_coupling: 1.0,
            detector_efficiency: 1.0,
            etalon_transmission: 1.0,
            mode_matching: 1.0,
        };
        let m = rate_metrics(RateInput::Rate(100.0), RateInput::Rate(40.0), 1000.0, &l, false, 0.5).unwrap();
        assert!((m.snr - 2.5).abs() < 1e-12);
        assert!((m.eta_ext - 0.06).abs() < 1e-12);
        assert!((m.eta_int - 0.12).abs() < 1e-12);
        let low = rate_metrics(RateInput::Rate(30.0), RateInput::Rate(40.0), 1000.0, &l, false, 0.5).unwrap();
        assert!(low.low_signal && low.eta_ext == 0.0);
    }

    #[test]
    fn power_law_examples() {
        let q = power_law_fit(&[(1.0, 1.0), (2.0, 4.0), (3.0, 9.0)], 0.0).unwrap();
        assert!((q.exponent - 2.0).abs() < 1e-12 && q.uncertainty < 1e-10);
        let l = power_law_fit(&[(1.0, 2.0), (2.0, 4.0), (4.0, 8.0)], 0.0).unwrap();
        assert!((l.exponent - 1.0).abs() < 1e-12);
        let one = power_law_fit(&[(1.0, 4.0), (2.0, 9.0), (3.0, 19.0), (4.0, 37.0)], 5.0).unwrap();
        assert_eq!((one.used_points, one.dropped_points.len()), (3, 1));
        assert!(power_law_fit(&[(1.0, 3.0), (2.0, 4.0), (3.0, 9.0), (4.0, 16.0)], 5.0).is_err());
    }

    #[test]
    fn auto_correlation_two_tags() {
        let h = auto_correlation_histogram(&stream(vec![0, 500]), 100, (0, 1000)).unwrap();
        assert_eq!(h.total(), 1);
        assert_eq!(h.counts[5], 1);
    }

    #[test]
    fn histogram_csv_round_trip() {
        let h = coincidence_histogram(&stream(vec![0, 40, 90]), &stream(vec![50, 60]), 20, (-100, 100)).unwrap();
        let mut buf = Vec::new();
        write_histogram_csv(&h, "abc123", &mut buf).unwrap();
        let (back, hash) = read_histogram_csv(buf.as_slice()).unwrap();
        assert_eq!(back, h);
        assert_eq!(hash, "abc123");
    }
}
