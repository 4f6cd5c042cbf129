//! Warmup adaptation: dual averaging of the step size and windowed
//! estimation of a diagonal inverse metric.

pub(crate) struct StepSizeAdapter {
    target: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
}

impl StepSizeAdapter {
    pub fn new(target: f64) -> Self {
        StepSizeAdapter {
            target,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            mu: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
            counter: 0.0,
        }
    }

    pub fn set_mu(&mut self, mu: f64) {
        self.mu = mu;
    }

    pub fn restart(&mut self) {
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Updates the running averages and returns the next step size.
    pub fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let stat = if accept_stat.is_nan() { 0.0 } else { accept_stat.min(1.0) };
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Welford running mean and variance.
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    fn restart(&mut self) {
        self.n = 0;
        self.mean.fill(0.0);
        self.m2.fill(0.0);
    }
}

/// Expanding-window schedule: a fast initial buffer, doubling slow windows,
/// and a terminal buffer for the final step-size fit.
pub(crate) struct WindowedVariance {
    n_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window_end: usize,
    counter: usize,
    enabled: bool,
    estimator: Welford,
}

impl WindowedVariance {
    pub fn new(dim: usize, n_warmup: usize) -> Self {
        let (mut init, mut term, mut base) = (75, 50, 25);
        let enabled = n_warmup >= 20;
        if enabled && init + term + base > n_warmup {
            init = (0.15 * n_warmup as f64) as usize;
            term = (0.1 * n_warmup as f64) as usize;
            base = n_warmup - (init + term);
        }
        WindowedVariance {
            n_warmup,
            init_buffer: init,
            term_buffer: term,
            window_size: base,
            next_window_end: init + base - 1,
            counter: 0,
            enabled,
            estimator: Welford::new(dim),
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.n_warmup - self.term_buffer
            && self.counter != self.n_warmup
    }

    fn window_ends(&self) -> bool {
        self.counter == self.next_window_end && self.counter != self.n_warmup
    }

    fn advance_window(&mut self) {
        let last = self.n_warmup - self.term_buffer - 1;
        if self.next_window_end == last {
            return;
        }
        self.window_size *= 2;
        self.next_window_end = self.counter + self.window_size;
        if self.next_window_end != last {
            let boundary = self.next_window_end + 2 * self.window_size;
            if boundary >= self.n_warmup - self.term_buffer {
                self.next_window_end = last;
            }
        }
    }

    /// Feeds one warmup draw; returns true when `inv_metric` was updated.
    pub fn learn(&mut self, q: &[f64], inv_metric: &mut [f64]) -> bool {
        if !self.enabled {
            return false;
        }
        if self.in_window() {
            self.estimator.add(q);
        }
        if self.window_ends() {
            self.advance_window();
            let n = self.estimator.n as f64;
            if self.estimator.n >= 2 {
                for (m, &s) in inv_metric.iter_mut().zip(&self.estimator.m2) {
                    let var = s / (n - 1.0);
                    *m = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0));
                }
            }
            self.estimator.restart();
            self.counter += 1;
            return true;
        }
        self.counter += 1;
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window_ends(n_warmup: usize) -> Vec<usize> {
        let mut w = WindowedVariance::new(1, n_warmup);
        let mut m = [1.0];
        (0..n_warmup).filter(|&i| w.learn(&[i as f64], &mut m)).collect()
    }

    #[test]
    fn default_schedule_for_1000_warmup() {
        assert_eq!(window_ends(1000), vec![99, 149, 249, 449, 949]);
    }

    #[test]
    fn short_warmup_rescales_buffers() {
        // 75 + 25 + 50 > 100, so buffers become 15/10 and the base window 75
        assert_eq!(window_ends(100), vec![89]);
        assert!(window_ends(10).is_empty());
    }

    #[test]
    fn schedule_for_500_warmup() {
        assert_eq!(window_ends(500), vec![99, 149, 249, 449]);
    }

    #[test]
    fn variance_is_regularized() {
        let mut w = WindowedVariance::new(1, 100);
        let mut m = [1.0];
        for i in 0..100 {
            // constant draws inside the window: variance 0 shrinks to the floor
            w.learn(&[if i < 15 { i as f64 } else { 3.0 }], &mut m);
        }
        let n = 75.0;
        assert!((m[0] - 1e-3 * 5.0 / (n + 5.0)).abs() < 1e-15);
    }

    #[test]
    fn dual_averaging_moves_toward_target() {
        let mut a = StepSizeAdapter::new(0.8);
        a.set_mu(0.0);
        let up = a.learn(1.0);
        a.restart();
        let down = a.learn(0.2);
        assert!(up > 1.0 && down < 1.0);
    }
}
