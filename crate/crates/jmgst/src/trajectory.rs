//! Per-patient running least squares on measurement prefixes.
//!
//! Each patient's biomarker measurements are fit by ordinary least squares on
//! every prefix of their visit history.  The estimating equations need, for
//! an arbitrary query time `u`, the prediction `xhat(u)` of the latent line
//! from the visits at or before `u`, together with the variance inflation
//! factor `theta(u) = 1/m + (u - tbar)^2 / S_tt` of that prediction.  Prefix
//! states are accumulated once with Welford/Youngs-Cramer updates (centered,
//! so no catastrophic cancellation) and queried in O(log m).

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("no patient contributes more than two measurements; residual variance is undefined")]
    NoDegreesOfFreedom,
}

/// Prefix-OLS state for one patient's measurement history.
#[derive(Debug, Clone)]
pub struct LongitudinalTrack {
    times: Vec<f64>,
    // Index m holds the state of the first m visits (index 0 is the empty state).
    mean_t: Vec<f64>,
    mean_w: Vec<f64>,
    s_tt: Vec<f64>,
    s_tw: Vec<f64>,
    s_ww: Vec<f64>,
}

/// OLS prediction at a query time from a measurement prefix.
#[derive(Debug, Clone, Copy)]
pub struct OlsFit {
    /// Number of measurements used.
    pub m: usize,
    /// Predicted trajectory value at the query time.
    pub xhat: f64,
    /// Variance inflation factor of the prediction.
    pub theta: f64,
}

impl LongitudinalTrack {
    /// Build the prefix states.  `times` must be strictly increasing.
    pub fn new(times: &[f64], values: &[f64]) -> Self {
        assert_eq!(times.len(), values.len(), "times and values must align");
        debug_assert!(times.windows(2).all(|w| w[0] < w[1]), "visit times must increase");
        let n = times.len();
        let mut track = LongitudinalTrack {
            times: times.to_vec(),
            mean_t: vec![0.0; n + 1],
            mean_w: vec![0.0; n + 1],
            s_tt: vec![0.0; n + 1],
            s_tw: vec![0.0; n + 1],
            s_ww: vec![0.0; n + 1],
        };
        for i in 0..n {
            let m = (i + 1) as f64;
            let dt = times[i] - track.mean_t[i];
            let dw = values[i] - track.mean_w[i];
            track.mean_t[i + 1] = track.mean_t[i] + dt / m;
            track.mean_w[i + 1] = track.mean_w[i] + dw / m;
            let dt2 = times[i] - track.mean_t[i + 1];
            track.s_tt[i + 1] = track.s_tt[i] + dt * dt2;
            track.s_tw[i + 1] = track.s_tw[i] + dt * (values[i] - track.mean_w[i + 1]);
            track.s_ww[i + 1] = track.s_ww[i] + dw * (values[i] - track.mean_w[i + 1]);
        }
        track
    }

    /// Total number of stored visits.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Visits strictly before `u`.
    pub fn count_before(&self, u: f64) -> usize {
        self.times.partition_point(|&t| t < u)
    }

    /// Visits at or before `u`.
    pub fn count_through(&self, u: f64) -> usize {
        self.times.partition_point(|&t| t <= u)
    }

    /// OLS prediction at `u` from the visits at or before `u`, never using
    /// more than the first `m_cap` visits (the analysis-visibility cap).
    /// `None` when fewer than two visits qualify.
    pub fn fit_at(&self, u: f64, m_cap: usize) -> Option<OlsFit> {
        let m = self.count_through(u).min(m_cap);
        self.fit_prefix(m, u)
    }

    /// OLS prediction at `u` from exactly the first `m` visits.
    pub fn fit_prefix(&self, m: usize, u: f64) -> Option<OlsFit> {
        if m < 2 {
            return None;
        }
        let s_tt = self.s_tt[m];
        if s_tt <= 0.0 {
            return None;
        }
        let slope = self.s_tw[m] / s_tt;
        let dev = u - self.mean_t[m];
        let xhat = self.mean_w[m] + slope * dev;
        let theta = 1.0 / m as f64 + dev * dev / s_tt;
        Some(OlsFit { m, xhat, theta })
    }

    /// Residual sum of squares of the OLS line through the first `m` visits
    /// (zero for prefixes too short to leave a residual).
    pub fn rss(&self, m: usize) -> f64 {
        if m < 2 || self.s_tt[m] <= 0.0 {
            return 0.0;
        }
        (self.s_ww[m] - self.s_tw[m] * self.s_tw[m] / self.s_tt[m]).max(0.0)
    }
}

/// Pooled residual-variance estimate of the measurement-error variance:
/// patients contributing more than two visible measurements pool their OLS
/// residual sums of squares over the pooled residual degrees of freedom.
pub fn pooled_sigma_sq<'a>(
    contributions: impl IntoIterator<Item = (&'a LongitudinalTrack, usize)>,
) -> Result<f64, TrajectoryError> {
    let mut num = 0.0;
    let mut dof = 0usize;
    for (track, m) in contributions {
        if m > 2 {
            num += track.rss(m);
            dof += m - 2;
        }
    }
    if dof == 0 {
        return Err(TrajectoryError::NoDegreesOfFreedom);
    }
    Ok(num / dof as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Plain two-pass OLS used as an independent check on the prefix states.
    fn naive_ols(times: &[f64], values: &[f64], u: f64) -> (f64, f64, f64) {
        let m = times.len() as f64;
        let tbar = times.iter().sum::<f64>() / m;
        let wbar = values.iter().sum::<f64>() / m;
        let s_tt: f64 = times.iter().map(|t| (t - tbar).powi(2)).sum();
        let s_tw: f64 = times.iter().zip(values).map(|(t, w)| (t - tbar) * (w - wbar)).sum();
        let slope = s_tw / s_tt;
        let xhat = wbar + slope * (u - tbar);
        let theta = 1.0 / m + (u - tbar).powi(2) / s_tt;
        let rss: f64 = times
            .iter()
            .zip(values)
            .map(|(t, w)| (w - (wbar + slope * (t - tbar))).powi(2))
            .sum();
        (xhat, theta, rss)
    }

    #[test]
    fn flat_example_by_hand() {
        // Values {0,1,0} at times {0,1,2}: slope 0, intercept 1/3.
        let track = LongitudinalTrack::new(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]);
        let fit = track.fit_at(2.0, usize::MAX).unwrap();
        assert_eq!(fit.m, 3);
        assert_abs_diff_eq!(fit.xhat, 1.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(track.rss(3), 2.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn theta_by_hand() {
        // Two visits at 0 and 2: theta(2) = 1/2 + (2-1)^2/2 = 1, and
        // extrapolating to 3 gives 1/2 + (3-1)^2/2 = 5/2.
        let track = LongitudinalTrack::new(&[0.0, 2.0], &[0.0, 2.0]);
        assert_abs_diff_eq!(track.fit_at(2.0, 9).unwrap().theta, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(track.fit_at(3.0, 9).unwrap().theta, 2.5, epsilon = 1e-14);
    }

    #[test]
    fn prefix_shorter_than_two_gives_nothing() {
        let track = LongitudinalTrack::new(&[0.0, 1.0], &[1.0, 2.0]);
        assert!(track.fit_at(0.5, usize::MAX).is_none()); // only one visit by 0.5
        assert!(track.fit_at(2.0, 1).is_none()); // cap excludes the second
        assert!(track.fit_at(2.0, usize::MAX).is_some());
    }

    #[test]
    fn two_point_fit_is_exact_interpolation() {
        let track = LongitudinalTrack::new(&[0.0, 1.0], &[3.0, 5.0]);
        let fit = track.fit_at(4.0, usize::MAX).unwrap();
        assert_abs_diff_eq!(fit.xhat, 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(track.rss(2), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn pooled_variance_by_hand() {
        // One patient with rss 2/3 over 1 dof, one too short to count.
        let a = LongitudinalTrack::new(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]);
        let b = LongitudinalTrack::new(&[0.0, 1.0], &[0.0, 1.0]);
        let got = pooled_sigma_sq([(&a, 3), (&b, 2)]).unwrap();
        assert_abs_diff_eq!(got, 2.0 / 3.0, epsilon = 1e-14);
        assert_eq!(pooled_sigma_sq([(&b, 2)]), Err(TrajectoryError::NoDegreesOfFreedom));
    }

    proptest! {
        /// Every prefix of the track agrees with a fresh two-pass OLS on the
        /// same visits: the running state is prefix-causal by construction.
        #[test]
        fn prefix_states_match_naive_ols(
            n in 2usize..12,
            raw in proptest::collection::vec((-5.0f64..5.0, -10.0f64..10.0), 12),
            u in -2.0f64..8.0,
        ) {
            let mut times: Vec<f64> = raw.iter().take(n).map(|p| p.0).collect();
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            times.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
            if times.len() < 2 { return Ok(()); }
            let values: Vec<f64> = raw.iter().take(times.len()).map(|p| p.1).collect();
            let track = LongitudinalTrack::new(&times, &values);
            for m in 2..=times.len() {
                let fit = track.fit_prefix(m, u).unwrap();
                let (xhat, theta, rss) = naive_ols(&times[..m], &values[..m], u);
                prop_assert!((fit.xhat - xhat).abs() < 1e-8 * (1.0 + xhat.abs()));
                prop_assert!((fit.theta - theta).abs() < 1e-8 * (1.0 + theta.abs()));
                prop_assert!((track.rss(m) - rss).abs() < 1e-8 * (1.0 + rss.abs()));
            }
        }
    }
}
