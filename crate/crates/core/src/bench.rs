//! Per-frame latency measurement of the tracking loop.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::runtime::{init_track, TrackState};
use crate::synth::{SyntheticSpec, SyntheticSequence};
use crate::weights::WeightStore;

pub const MIN_RUNS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchSettings {
    pub runs: usize,
    pub warmup: usize,
    /// Distinct synthetic frames cycled through during measurement.
    pub frames: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            runs: MIN_RUNS,
            warmup: 3,
            frames: 8,
            seed: 0,
        }
    }
}

impl BenchSettings {
    pub fn validate(&self) -> Result<()> {
        if self.runs < MIN_RUNS {
            return Err(Error::Input(format!("at least {MIN_RUNS} measured runs required, got {}", self.runs)));
        }
        if self.frames == 0 {
            return Err(Error::Input("benchmark needs at least one frame".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub label: String,
    pub median: Duration,
    pub p90: Duration,
    pub warmup: usize,
    pub threads: usize,
    pub profile: &'static str,
    /// Measured samples in run order, warmup excluded.
    pub samples: Vec<Duration>,
}

impl BenchResult {
    pub fn median_ms(&self) -> f64 {
        self.median.as_secs_f64() * 1e3
    }

    pub fn p90_ms(&self) -> f64 {
        self.p90.as_secs_f64() * 1e3
    }

    pub fn runs(&self) -> usize {
        self.samples.len()
    }
}

/// Time source; tests substitute a scripted one.
pub trait Clock {
    fn now(&mut self) -> Duration;
}

pub struct MonotonicClock(Instant);

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock(Instant::now())
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&mut self) -> Duration {
        self.0.elapsed()
    }
}

pub fn build_profile() -> &'static str {
    if cfg!(debug_assertions) {
        "debug"
    } else {
        "release"
    }
}

/// Runs `body` `warmup + runs` times and returns the last `runs` durations.
pub fn measure<C: Clock>(
    clock: &mut C,
    warmup: usize,
    runs: usize,
    mut body: impl FnMut(usize) -> Result<()>,
) -> Result<Vec<Duration>> {
    let mut samples = Vec::with_capacity(runs);
    for i in 0..warmup + runs {
        let start = clock.now();
        body(i)?;
        let end = clock.now();
        if i >= warmup {
            samples.push(end.saturating_sub(start));
        }
    }
    Ok(samples)
}

pub fn median(samples: &[Duration]) -> Duration {
    let mut s = samples.to_vec();
    s.sort_unstable();
    match s.len() {
        0 => Duration::ZERO,
        n if n % 2 == 1 => s[n / 2],
        n => (s[n / 2 - 1] + s[n / 2]) / 2,
    }
}

/// Nearest-rank 90th percentile.
pub fn p90(samples: &[Duration]) -> Duration {
    let mut s = samples.to_vec();
    s.sort_unstable();
    if s.is_empty() {
        return Duration::ZERO;
    }
    let rank = (s.len() * 9).div_ceil(10);
    s[rank.max(1) - 1]
}

pub fn summarize(label: impl Into<String>, samples: Vec<Duration>, warmup: usize) -> BenchResult {
    BenchResult {
        label: label.into(),
        median: median(&samples),
        p90: p90(&samples),
        warmup,
        threads: 1,
        profile: build_profile(),
        samples,
    }
}

/// Synthetic frames sized so the search crop stays inside the frame.
pub fn bench_sequence(weights: &WeightStore, settings: &BenchSettings) -> SyntheticSequence {
    let side = weights.config().search_size.0 * 3 / 2;
    let target = weights.config().search_size.0 as f64 / 4.0;
    SyntheticSpec::moving(side, side, settings.frames + 1, target, settings.seed).generate()
}

struct Session<'w> {
    seq: SyntheticSequence,
    state: TrackState<'w>,
}

impl<'w> Session<'w> {
    fn new(weights: &'w WeightStore, settings: &BenchSettings) -> Result<Self> {
        let seq = bench_sequence(weights, settings);
        let state = init_track(&seq.frames[0], seq.boxes[0], weights)?;
        Ok(Session { seq, state })
    }

    /// Tracks one frame. Crops are resampled to a fixed size, so the work per
    /// frame does not depend on where the tracker has wandered.
    fn step(&mut self, i: usize) -> Result<()> {
        let k = 1 + i % (self.seq.frames.len() - 1);
        self.state.track_frame(&self.seq.frames[k])?;
        Ok(())
    }
}

/// Steady-state `track_frame` latency on the calling thread.
pub fn bench_latency(weights: &WeightStore, settings: &BenchSettings, label: impl Into<String>) -> Result<BenchResult> {
    bench_latency_with(weights, settings, label, &mut MonotonicClock::new())
}

pub fn bench_latency_with<C: Clock>(
    weights: &WeightStore,
    settings: &BenchSettings,
    label: impl Into<String>,
    clock: &mut C,
) -> Result<BenchResult> {
    settings.validate()?;
    let mut session = Session::new(weights, settings)?;
    let samples = measure(clock, settings.warmup, settings.runs, |i| session.step(i))?;
    Ok(summarize(label, samples, settings.warmup))
}

/// Benchmarks several models round-robin, one frame each per round, so slow
/// drift in machine speed affects all of them alike.
pub fn bench_interleaved(models: &[(String, &WeightStore)], settings: &BenchSettings) -> Result<Vec<BenchResult>> {
    settings.validate()?;
    let mut sessions = models
        .iter()
        .map(|(_, w)| Session::new(w, settings))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = vec![Vec::with_capacity(settings.runs); models.len()];
    let mut clock = MonotonicClock::new();
    for round in 0..settings.warmup + settings.runs {
        for (k, session) in sessions.iter_mut().enumerate() {
            let start = clock.now();
            session.step(round)?;
            let end = clock.now();
            if round >= settings.warmup {
                samples[k].push(end - start);
            }
        }
    }
    Ok(models
        .iter()
        .zip(samples)
        .map(|((label, _), s)| summarize(label.clone(), s, settings.warmup))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    /// Each call advances by the next scripted step.
    struct Scripted {
        t: Duration,
        steps: Vec<Duration>,
        i: usize,
    }

    impl Clock for Scripted {
        fn now(&mut self) -> Duration {
            let d = self.steps[self.i % self.steps.len()];
            self.i += 1;
            self.t += d;
            self.t
        }
    }

    #[test]
    fn warmup_samples_are_dropped() {
        // the k-th body costs 1000 + k ms; warmup bodies 0..5 would shift the median
        let mut steps = Vec::new();
        for k in 0..35u64 {
            steps.push(Duration::ZERO);
            steps.push(Duration::from_millis(1000 + k));
        }
        let mut clock = Scripted { t: Duration::ZERO, steps, i: 0 };
        let s = measure(&mut clock, 5, 30, |_| Ok(())).unwrap();
        assert_eq!(s.len(), 30);
        assert_eq!(s[0], Duration::from_millis(1005));
        let r = summarize("x", s, 5);
        assert_eq!(r.median, Duration::from_micros(1019_500));
        assert_eq!(r.p90, Duration::from_millis(1031));
    }

    #[test]
    fn percentiles_of_small_sets() {
        let ms = |v: &[u64]| v.iter().map(|&x| Duration::from_millis(x)).collect::<Vec<_>>();
        assert_eq!(median(&ms(&[3, 1, 2])), Duration::from_millis(2));
        assert_eq!(p90(&ms(&[5])), Duration::from_millis(5));
        assert_eq!(p90(&ms(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10])), Duration::from_millis(9));
    }

    #[test]
    fn too_few_runs_is_an_input_error() {
        let w = WeightStore::generate(&ModelConfig::toy(1, 1), 0).unwrap();
        let s = BenchSettings {
            runs: 29,
            ..Default::default()
        };
        assert!(matches!(bench_latency(&w, &s, "t"), Err(Error::Input(_))));
    }

    #[test]
    fn toy_benchmark_reports_thirty_samples() {
        let w = WeightStore::generate(&ModelConfig::toy(1, 1), 0).unwrap();
        let r = bench_latency(&w, &BenchSettings::default(), "toy").unwrap();
        assert_eq!(r.runs(), 30);
        assert_eq!(r.threads, 1);
        assert!(r.median <= r.p90);
    }
}
