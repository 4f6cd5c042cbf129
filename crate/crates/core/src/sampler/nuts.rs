//! Leapfrog integration, multinomial NUTS and static HMC transitions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{usable, Algorithm, IterationStats, LogDensity, SamplerConfig};
use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

#[derive(Debug, Clone)]
pub(crate) struct Point {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub lp: f64,
}

impl Point {
    fn copy_from(&mut self, other: &Point) {
        self.q.copy_from_slice(&other.q);
        self.p.copy_from_slice(&other.p);
        self.grad.copy_from_slice(&other.grad);
        self.lp = other.lp;
    }
}

pub(crate) struct Integrator<'a, M: LogDensity + ?Sized> {
    model: &'a M,
    pub point: Point,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    max_energy_error: f64,
    n_leapfrog: usize,
    divergent: bool,
}

/// Edge momenta and momentum sums of a (sub)trajectory.
struct Edges {
    p_beg: Vec<f64>,
    p_sharp_beg: Vec<f64>,
    p_end: Vec<f64>,
    p_sharp_end: Vec<f64>,
}

impl Edges {
    fn zeros(dim: usize) -> Self {
        Edges {
            p_beg: vec![0.0; dim],
            p_sharp_beg: vec![0.0; dim],
            p_end: vec![0.0; dim],
            p_sharp_end: vec![0.0; dim],
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

impl<'a, M: LogDensity + ?Sized> Integrator<'a, M> {
    pub fn new(model: &'a M, q: Vec<f64>, max_energy_error: f64) -> Result<Self> {
        let dim = model.dim();
        let mut grad = vec![0.0; dim];
        let lp = model.log_density_grad(&q, &mut grad);
        if !usable(lp) {
            return Err(Error::Sampler(
                "initial point has a non-finite log density".into(),
            ));
        }
        Ok(Integrator {
            model,
            point: Point {
                q,
                p: vec![0.0; dim],
                grad,
                lp,
            },
            step_size: 1.0,
            inv_metric: vec![1.0; dim],
            max_energy_error,
            n_leapfrog: 0,
            divergent: false,
        })
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p
            .iter()
            .zip(&self.inv_metric)
            .map(|(p, m)| p * p * m)
            .sum::<f64>()
    }

    fn hamiltonian(&self, z: &Point) -> f64 {
        if !usable(z.lp) {
            return f64::INFINITY;
        }
        let h = -z.lp + self.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn resample_momentum(&mut self, rng: &mut ChaCha8Rng) {
        for (p, m) in self.point.p.iter_mut().zip(&self.inv_metric) {
            let z: f64 = rng.sample(StandardNormal);
            *p = z / m.sqrt();
        }
    }

    fn leapfrog(&self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        z.lp = self.model.log_density_grad(&z.q, &mut z.grad);
        if !usable(z.lp) {
            return;
        }
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
    }

    /// Doubling/halving search for a step size whose single leapfrog step
    /// has acceptance near 0.8.
    pub fn init_step_size(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.step_size == 0.0 || self.step_size > 1e7 {
            return Ok(());
        }
        let start = self.point.clone();
        let target = 0.8f64.ln();
        let trial = |this: &mut Self, rng: &mut ChaCha8Rng| {
            this.point.copy_from(&start);
            this.resample_momentum(rng);
            let h0 = this.hamiltonian(&this.point);
            let mut z = this.point.clone();
            this.leapfrog(&mut z, this.step_size);
            h0 - this.hamiltonian(&z)
        };
        let direction = if trial(self, rng) > target { 1 } else { -1 };
        loop {
            let delta_h = trial(self, rng);
            if direction == 1 && !(delta_h > target) {
                break;
            }
            if direction == -1 && !(delta_h < target) {
                break;
            }
            self.step_size *= if direction == 1 { 2.0 } else { 0.5 };
            if self.step_size > 1e7 {
                return Err(Error::Sampler(
                    "step size diverged during initialization; posterior may be improper".into(),
                ));
            }
            if self.step_size == 0.0 {
                return Err(Error::Sampler(
                    "no acceptable step size; gradient may be wrong".into(),
                ));
            }
        }
        self.point.copy_from(&start);
        Ok(())
    }

    pub fn transition(&mut self, config: &SamplerConfig, rng: &mut ChaCha8Rng) -> IterationStats {
        self.resample_momentum(rng);
        self.n_leapfrog = 0;
        self.divergent = false;
        let (depth, accept_stat) = match config.algorithm {
            Algorithm::Nuts => self.nuts(config.max_tree_depth, rng),
            Algorithm::StaticHmc { n_leapfrog } => (0, self.static_hmc(n_leapfrog, rng)),
        };
        IterationStats {
            lp: self.point.lp,
            accept_stat,
            step_size: self.step_size,
            tree_depth: depth as u32,
            n_leapfrog: self.n_leapfrog as u32,
            divergent: self.divergent,
            energy: self.hamiltonian(&self.point),
        }
    }

    fn static_hmc(&mut self, steps: usize, rng: &mut ChaCha8Rng) -> f64 {
        let h0 = self.hamiltonian(&self.point);
        let mut z = self.point.clone();
        for _ in 0..steps {
            self.leapfrog(&mut z, self.step_size);
            self.n_leapfrog += 1;
            if !usable(z.lp) {
                break;
            }
        }
        let h = self.hamiltonian(&z);
        if h - h0 > self.max_energy_error {
            self.divergent = true;
        }
        let accept = (h0 - h).exp().min(1.0);
        if rng.random::<f64>() < accept {
            self.point = z;
        }
        accept
    }

    fn nuts(&mut self, max_depth: usize, rng: &mut ChaCha8Rng) -> (usize, f64) {
        let dim = self.point.q.len();
        let h0 = self.hamiltonian(&self.point);
        let mut z_fwd = self.point.clone();
        let mut z_bck = self.point.clone();
        let mut z_sample = self.point.clone();
        let mut z_propose = self.point.clone();

        let p0 = self.point.p.clone();
        let ps0 = self.p_sharp(&p0);
        let (mut p_fwd_fwd, mut ps_fwd_fwd) = (p0.clone(), ps0.clone());
        let (mut p_fwd_bck, mut ps_fwd_bck) = (p0.clone(), ps0.clone());
        let (mut p_bck_fwd, mut ps_bck_fwd) = (p0.clone(), ps0.clone());
        let (mut p_bck_bck, mut ps_bck_bck) = (p0.clone(), ps0);
        let mut rho = p0;

        let mut log_sum_weight = 0.0;
        let mut sum_metro = 0.0;
        let mut depth = 0;

        while depth < max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid;
            if rng.random::<f64>() > 0.5 {
                rho_bck.copy_from_slice(&rho);
                p_bck_fwd.copy_from_slice(&p_fwd_bck);
                ps_bck_fwd.copy_from_slice(&ps_fwd_bck);
                let mut edges = Edges::zeros(dim);
                valid = self.build_tree(
                    depth,
                    &mut z_fwd,
                    &mut z_propose,
                    &mut edges,
                    &mut rho_fwd,
                    h0,
                    1.0,
                    &mut lsw_subtree,
                    &mut sum_metro,
                    rng,
                );
                p_fwd_bck = edges.p_beg;
                ps_fwd_bck = edges.p_sharp_beg;
                p_fwd_fwd = edges.p_end;
                ps_fwd_fwd = edges.p_sharp_end;
            } else {
                rho_fwd.copy_from_slice(&rho);
                p_fwd_bck.copy_from_slice(&p_bck_fwd);
                ps_fwd_bck.copy_from_slice(&ps_bck_fwd);
                let mut edges = Edges::zeros(dim);
                valid = self.build_tree(
                    depth,
                    &mut z_bck,
                    &mut z_propose,
                    &mut edges,
                    &mut rho_bck,
                    h0,
                    -1.0,
                    &mut lsw_subtree,
                    &mut sum_metro,
                    rng,
                );
                p_bck_fwd = edges.p_beg;
                ps_bck_fwd = edges.p_sharp_beg;
                p_bck_bck = edges.p_end;
                ps_bck_bck = edges.p_sharp_end;
            }
            if !valid {
                break;
            }
            depth += 1;

            if lsw_subtree > log_sum_weight
                || rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp()
            {
                z_sample.copy_from(&z_propose);
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

            rho = add(&rho_bck, &rho_fwd);
            let mut persist = no_u_turn(&ps_bck_bck, &ps_fwd_fwd, &rho);
            let rho_ext = add(&rho_bck, &p_fwd_bck);
            persist &= no_u_turn(&ps_bck_bck, &ps_fwd_bck, &rho_ext);
            let rho_ext = add(&rho_fwd, &p_bck_fwd);
            persist &= no_u_turn(&ps_bck_fwd, &ps_fwd_fwd, &rho_ext);
            if !persist {
                break;
            }
        }
        let _ = (&p_fwd_fwd, &p_bck_bck);
        let accept = if self.n_leapfrog > 0 {
            sum_metro / self.n_leapfrog as f64
        } else {
            0.0
        };
        self.point = z_sample;
        (depth, accept)
    }

    /// Extends the trajectory from `z` by `2^depth` leapfrog steps in
    /// direction `sign`. `edges` receives the first and last momenta of the
    /// new subtree (in integration order), `rho` accumulates its momenta.
    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut Point,
        z_propose: &mut Point,
        edges: &mut Edges,
        rho: &mut [f64],
        h0: f64,
        sign: f64,
        log_sum_weight: &mut f64,
        sum_metro: &mut f64,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, sign * self.step_size);
            self.n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - h0 > self.max_energy_error {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            *sum_metro += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.copy_from(z);
            let ps = self.p_sharp(&z.p);
            edges.p_sharp_beg.copy_from_slice(&ps);
            edges.p_sharp_end.copy_from_slice(&ps);
            edges.p_beg.copy_from_slice(&z.p);
            edges.p_end.copy_from_slice(&z.p);
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            return !self.divergent;
        }
        let dim = z.q.len();

        let mut lsw_init = f64::NEG_INFINITY;
        let mut rho_init = vec![0.0; dim];
        let mut init = Edges::zeros(dim);
        if !self.build_tree(
            depth - 1,
            z,
            z_propose,
            &mut init,
            &mut rho_init,
            h0,
            sign,
            &mut lsw_init,
            sum_metro,
            rng,
        ) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut rho_final = vec![0.0; dim];
        let mut fin = Edges::zeros(dim);
        if !self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut fin,
            &mut rho_final,
            h0,
            sign,
            &mut lsw_final,
            sum_metro,
            rng,
        ) {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree || rng.random::<f64>() < (lsw_final - lsw_subtree).exp() {
            z_propose.copy_from(&z_propose_final);
        }

        let rho_subtree = add(&rho_init, &rho_final);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = no_u_turn(&init.p_sharp_beg, &fin.p_sharp_end, &rho_subtree);
        let rho_ext = add(&rho_init, &fin.p_beg);
        persist &= no_u_turn(&init.p_sharp_beg, &fin.p_sharp_beg, &rho_ext);
        let rho_ext = add(&rho_final, &init.p_end);
        persist &= no_u_turn(&init.p_sharp_end, &fin.p_sharp_end, &rho_ext);

        edges.p_beg = init.p_beg;
        edges.p_sharp_beg = init.p_sharp_beg;
        edges.p_end = fin.p_end;
        edges.p_sharp_end = fin.p_sharp_end;
        persist
    }
}
