//! Latency estimate and the degradation decision rule.

/// Controller constants. Latencies are in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub beta: f64,
    pub high_ms: f64,
    pub low_ms: f64,
    pub period_ms: u64,
    /// A module that has not answered a signal after this many control
    /// periods is marked FAILED.
    pub report_timeout_periods: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            beta: 0.2,
            high_ms: 200.0,
            low_ms: 120.0,
            period_ms: 500,
            report_timeout_periods: 2,
        }
    }
}

/// Exponentially weighted moving average of RTT samples. The first sample
/// initializes the estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyEstimator {
    beta: f64,
    estimate: Option<f64>,
}

impl LatencyEstimator {
    pub fn new(beta: f64) -> Self {
        Self { beta, estimate: None }
    }

    pub fn observe(&mut self, rtt_ms: f64) {
        if !rtt_ms.is_finite() || rtt_ms < 0.0 {
            log::warn!("ignoring invalid latency sample {rtt_ms}");
            return;
        }
        self.estimate = Some(match self.estimate {
            None => rtt_ms,
            Some(l) => (1.0 - self.beta) * l + self.beta * rtt_ms,
        });
    }

    pub fn estimate(&self) -> Option<f64> {
        self.estimate
    }
}

/// What the decision rule needs to know about one loaded module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleView {
    pub name: String,
    pub degradable: bool,
    pub failed: bool,
    pub requested_units: u32,
    pub granted_units: u32,
}

/// One decision per control period. Above `high_ms` the first module in
/// priority order that still has a unit loses one; below `low_ms` the last
/// degraded module in priority order regains one. Inside the band, nothing.
pub fn decide_degradation(
    config: &ControllerConfig,
    estimate: Option<f64>,
    modules: &[ModuleView],
    priority: &[String],
) -> Vec<(String, u32)> {
    let Some(l) = estimate else {
        return Vec::new();
    };
    let eligible = |name: &String| {
        modules
            .iter()
            .find(|m| &m.name == name && m.degradable && !m.failed)
    };
    if l > config.high_ms {
        priority
            .iter()
            .filter_map(eligible)
            .find(|m| m.granted_units > 0)
            .map(|m| vec![(m.name.clone(), m.granted_units - 1)])
            .unwrap_or_default()
    } else if l < config.low_ms {
        priority
            .iter()
            .rev()
            .filter_map(eligible)
            .find(|m| m.granted_units < m.requested_units)
            .map(|m| vec![(m.name.clone(), m.granted_units + 1)])
            .unwrap_or_default()
    } else {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera(granted: u32) -> ModuleView {
        ModuleView {
            name: "camera".into(),
            degradable: true,
            failed: false,
            requested_units: 5,
            granted_units: granted,
        }
    }

    #[test]
    fn constant_samples_converge() {
        let mut e = LatencyEstimator::new(0.2);
        e.observe(40.0);
        for _ in 0..100 {
            e.observe(100.0);
        }
        // |L - 100| = 60 * 0.8^100
        assert!((e.estimate().unwrap() - 100.0).abs() < 1e-6);
    }

    #[test]
    fn single_spike() {
        let mut e = LatencyEstimator::new(0.2);
        e.observe(100.0);
        e.observe(1000.0);
        assert!((e.estimate().unwrap() - 280.0).abs() < 1e-12);
    }

    #[test]
    fn no_samples_no_action() {
        let c = ControllerConfig::default();
        assert!(decide_degradation(&c, None, &[camera(5)], &["camera".into()]).is_empty());
    }

    #[test]
    fn held_high_steps_down_one_unit() {
        let c = ControllerConfig::default();
        let p = vec!["camera".to_string()];
        assert_eq!(decide_degradation(&c, Some(250.0), &[camera(5)], &p), vec![("camera".into(), 4)]);
        assert_eq!(decide_degradation(&c, Some(250.0), &[camera(4)], &p), vec![("camera".into(), 3)]);
        assert!(decide_degradation(&c, Some(250.0), &[camera(0)], &p).is_empty());
    }

    #[test]
    fn band_is_quiet_and_low_restores() {
        let c = ControllerConfig::default();
        let p = vec!["camera".to_string()];
        assert!(decide_degradation(&c, Some(150.0), &[camera(3)], &p).is_empty());
        assert_eq!(decide_degradation(&c, Some(50.0), &[camera(3)], &p), vec![("camera".into(), 4)]);
        assert_eq!(decide_degradation(&c, Some(50.0), &[camera(4)], &p), vec![("camera".into(), 5)]);
        assert!(decide_degradation(&c, Some(50.0), &[camera(5)], &p).is_empty());
    }

    #[test]
    fn priority_order_and_reverse_restore() {
        let c = ControllerConfig::default();
        let mut views = vec![camera(5), camera(2)];
        views[1].name = "views".into();
        views[1].requested_units = 2;
        let p = vec!["views".to_string(), "camera".to_string()];
        assert_eq!(decide_degradation(&c, Some(300.0), &views, &p), vec![("views".into(), 1)]);
        views[1].granted_units = 0;
        assert_eq!(decide_degradation(&c, Some(300.0), &views, &p), vec![("camera".into(), 4)]);
        views[0].granted_units = 4;
        assert_eq!(decide_degradation(&c, Some(10.0), &views, &p), vec![("camera".into(), 5)]);
    }
}
