//! AdamW with the AMSGrad second-moment maximum, the one-cycle learning
//! rate schedule, and early stopping.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Entry;
use crate::error::{Error, Result};

/// One parameter's view for an optimizer step.
pub struct ParamUpdate<'a> {
    pub name: &'a str,
    pub data: &'a mut [f64],
    pub grad: &'a [f64],
}

#[derive(Clone, Debug, Default)]
struct MomentState {
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
    t: u64,
}

/// Decoupled-weight-decay Adam with the AMSGrad maximum. State is keyed by
/// parameter name, so parameters excluded from a step (frozen) keep their
/// state untouched and late joiners start fresh.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: HashMap<String, MomentState>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: HashMap::new(),
        }
    }

    /// Applies one update to every listed parameter. Rejects non-finite
    /// gradients before touching any state, naming the offending parameter.
    pub fn step(&mut self, params: &mut [ParamUpdate]) -> Result<()> {
        for p in params.iter() {
            if p.grad.len() != p.data.len() {
                return Err(Error::invalid(format!(
                    "optimizer: parameter {} has {} values but {} gradients",
                    p.name,
                    p.data.len(),
                    p.grad.len()
                )));
            }
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {}",
                    p.name
                )));
            }
        }
        for p in params.iter_mut() {
            let slot = self.state.entry(p.name.to_string()).or_default();
            if slot.m.is_empty() {
                slot.m = vec![0.0; p.data.len()];
                slot.v = vec![0.0; p.data.len()];
                slot.v_max = vec![0.0; p.data.len()];
            }
            slot.t += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
            for i in 0..p.data.len() {
                let g = p.grad[i];
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                slot.v_max[i] = slot.v_max[i].max(slot.v[i]);
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v_max[i] / bc2;
                p.data[i] -=
                    self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p.data[i]);
            }
        }
        Ok(())
    }

    /// Serializes moment state as checkpoint entries (three arrays plus a
    /// step counter per parameter).
    pub fn to_entries(&self) -> Vec<Entry> {
        let mut names: Vec<&String> = self.state.keys().collect();
        names.sort();
        let mut out = Vec::new();
        for name in names {
            let s = &self.state[name];
            let n = s.m.len();
            out.push(Entry::new(format!("optim/{name}/m"), vec![n], s.m.clone()));
            out.push(Entry::new(format!("optim/{name}/v"), vec![n], s.v.clone()));
            out.push(Entry::new(format!("optim/{name}/v_max"), vec![n], s.v_max.clone()));
            out.push(Entry::new(format!("optim/{name}/t"), vec![1], vec![s.t as f64]));
        }
        out
    }

    /// Restores moment state previously produced by `to_entries`.
    pub fn load_entries(&mut self, entries: &[Entry]) -> Result<()> {
        self.state.clear();
        for e in entries {
            let Some(rest) = e.name.strip_prefix("optim/") else {
                continue;
            };
            let Some((param, field)) = rest.rsplit_once('/') else {
                return Err(Error::invalid(format!("optimizer entry {} malformed", e.name)));
            };
            let slot = self.state.entry(param.to_string()).or_default();
            match field {
                "m" => slot.m = e.data.clone(),
                "v" => slot.v = e.data.clone(),
                "v_max" => slot.v_max = e.data.clone(),
                "t" => slot.t = e.data[0] as u64,
                other => {
                    return Err(Error::invalid(format!("optimizer field {other} unknown")))
                }
            }
        }
        Ok(())
    }

    #[cfg(test)]
    fn v_max_of(&self, name: &str) -> &[f64] {
        &self.state[name].v_max
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OneCycleSpec {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for OneCycleSpec {
    fn default() -> Self {
        OneCycleSpec {
            max_lr: 1e-3,
            total_steps: 1,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

impl OneCycleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_lr <= 0.0 || self.total_steps == 0 {
            return Err(Error::invalid("one-cycle: max_lr and total_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.pct_start) || self.pct_start == 0.0 {
            return Err(Error::invalid("one-cycle: pct_start must lie in (0, 1)"));
        }
        if self.div_factor <= 1.0 || self.final_div_factor <= 1.0 {
            return Err(Error::invalid("one-cycle: div factors must exceed 1"));
        }
        Ok(())
    }
}

fn cosine_interp(start: f64, end: f64, frac: f64) -> f64 {
    end + (start - end) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

/// Learning rate at a given step: cosine warmup from `max_lr/div_factor`
/// to `max_lr` over the first `pct_start` of training, then cosine
/// annealing down to `max_lr/(div_factor*final_div_factor)`.
pub fn onecycle_lr(spec: &OneCycleSpec, step: usize) -> f64 {
    let total = spec.total_steps as f64;
    let warm = spec.pct_start * total;
    let initial = spec.max_lr / spec.div_factor;
    let floor = spec.max_lr / (spec.div_factor * spec.final_div_factor);
    let s = (step as f64).min(total);
    if s <= warm {
        cosine_interp(initial, spec.max_lr, s / warm)
    } else {
        cosine_interp(spec.max_lr, floor, (s - warm) / (total - warm))
    }
}

/// Early stopping on a maximized metric: stop after `patience` consecutive
/// updates without improvement greater than `min_delta` over the best.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    /// Feeds one epoch's metric; returns true when training should stop.
    pub fn update(&mut self, value: f64) -> bool {
        if value > self.best + self.min_delta {
            self.best = value;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_gradient_step_is_pure_decay() {
        let mut opt = AdamW::new(0.05, 0.01);
        let mut theta = vec![1.0, -2.0, 0.25];
        let want: Vec<f64> = theta.iter().map(|t| t * (1.0 - 0.05 * 0.01)).collect();
        let grad = vec![0.0; 3];
        opt.step(&mut [ParamUpdate {
            name: "w",
            data: &mut theta,
            grad: &grad,
        }])
        .unwrap();
        assert_eq!(theta, want);
    }

    #[test]
    fn constant_gradient_step_size_approaches_lr() {
        let mut opt = AdamW::new(0.01, 0.0);
        let mut theta = vec![0.0];
        let grad = vec![1.0];
        let mut prev = theta[0];
        for step in 0..300 {
            opt.step(&mut [ParamUpdate {
                name: "w",
                data: &mut theta,
                grad: &grad,
            }])
            .unwrap();
            let delta = (theta[0] - prev).abs();
            prev = theta[0];
            if step > 250 {
                assert!((delta - 0.01).abs() < 1e-4, "step {step} delta {delta}");
            }
        }
    }

    #[test]
    fn quadratic_converges() {
        let mut opt = AdamW::new(0.1, 0.0);
        let mut theta = vec![1.0];
        for _ in 0..200 {
            let grad = vec![2.0 * theta[0]];
            opt.step(&mut [ParamUpdate {
                name: "w",
                data: &mut theta,
                grad: &grad,
            }])
            .unwrap();
        }
        assert!(theta[0].abs() < 1e-2, "theta {}", theta[0]);
    }

    #[test]
    fn v_max_never_decreases() {
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut theta = vec![0.5; 4];
        let mut rng = StdRng::seed_from_u64(3);
        let mut prev = vec![0.0; 4];
        for _ in 0..100 {
            let grad: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            opt.step(&mut [ParamUpdate {
                name: "w",
                data: &mut theta,
                grad: &grad,
            }])
            .unwrap();
            let cur = opt.v_max_of("w").to_vec();
            for (c, p) in cur.iter().zip(&prev) {
                assert!(c >= p);
            }
            prev = cur;
        }
    }

    #[test]
    fn nan_gradient_aborts_naming_parameter() {
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut theta = vec![1.0, 2.0];
        let before = theta.clone();
        let grad = vec![0.0, f64::NAN];
        let err = opt
            .step(&mut [ParamUpdate {
                name: "head.weight",
                data: &mut theta,
                grad: &grad,
            }])
            .unwrap_err();
        assert!(err.to_string().contains("head.weight"), "{err}");
        assert_eq!(theta, before);
    }

    #[test]
    fn skipped_parameters_keep_state() {
        let mut opt = AdamW::new(1e-2, 0.0);
        let mut a = vec![1.0];
        let mut b = vec![1.0];
        let grad = vec![0.5];
        opt.step(&mut [
            ParamUpdate { name: "a", data: &mut a, grad: &grad },
            ParamUpdate { name: "b", data: &mut b, grad: &grad },
        ])
        .unwrap();
        let b_after_one = b.clone();
        // Freeze b for a few steps; its state must not move.
        for _ in 0..3 {
            opt.step(&mut [ParamUpdate { name: "a", data: &mut a, grad: &grad }]).unwrap();
        }
        assert_eq!(b, b_after_one);
        let entries = opt.to_entries();
        let t_b = entries.iter().find(|e| e.name == "optim/b/t").unwrap();
        assert_eq!(t_b.data[0], 1.0);
        let t_a = entries.iter().find(|e| e.name == "optim/a/t").unwrap();
        assert_eq!(t_a.data[0], 4.0);
    }

    #[test]
    fn state_round_trips_through_entries() {
        let mut rng = StdRng::seed_from_u64(9);
        let mut opt = AdamW::new(3e-3, 0.01);
        let mut theta = vec![0.3; 5];
        for _ in 0..7 {
            let grad: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            opt.step(&mut [ParamUpdate { name: "w", data: &mut theta, grad: &grad }]).unwrap();
        }
        let mut restored = AdamW::new(3e-3, 0.01);
        restored.load_entries(&opt.to_entries()).unwrap();
        let mut theta_b = theta.clone();
        let grad = vec![0.123; 5];
        opt.step(&mut [ParamUpdate { name: "w", data: &mut theta, grad: &grad }]).unwrap();
        restored
            .step(&mut [ParamUpdate { name: "w", data: &mut theta_b, grad: &grad }])
            .unwrap();
        assert_eq!(theta, theta_b);
    }

    #[test]
    fn onecycle_endpoints_and_peak() {
        let spec = OneCycleSpec {
            max_lr: 1e-3,
            total_steps: 1000,
            ..OneCycleSpec::default()
        };
        spec.validate().unwrap();
        let lr0 = onecycle_lr(&spec, 0);
        assert!((lr0 - 1e-3 / 25.0).abs() < 1e-18, "{lr0}");
        let peak = onecycle_lr(&spec, 300);
        assert!((peak - 1e-3).abs() < 1e-15, "{peak}");
        let end = onecycle_lr(&spec, 1000);
        assert!((end - 1e-3 / 25.0 / 1e4).abs() < 1e-18, "{end}");
        // Past the end the rate stays at the floor.
        assert_eq!(onecycle_lr(&spec, 5000), end);
    }

    #[test]
    fn onecycle_descent_midpoint_and_continuity() {
        let spec = OneCycleSpec {
            max_lr: 2e-3,
            total_steps: 1000,
            ..OneCycleSpec::default()
        };
        let floor = 2e-3 / 25.0 / 1e4;
        let mid = onecycle_lr(&spec, 650);
        assert!((mid - (2e-3 + floor) / 2.0).abs() < 1e-12, "{mid}");
        // Continuous across the phase boundary.
        let before = onecycle_lr(&spec, 300);
        let after = onecycle_lr(&spec, 301);
        assert!((before - 2e-3).abs() < 1e-12);
        assert!(before - after < 2e-3 * 1e-4, "jump {}", before - after);
        // Monotone up then down.
        for s in 1..=300 {
            assert!(onecycle_lr(&spec, s) >= onecycle_lr(&spec, s - 1));
        }
        for s in 301..=1000 {
            assert!(onecycle_lr(&spec, s) <= onecycle_lr(&spec, s - 1));
        }
    }

    #[test]
    fn onecycle_rejects_bad_specs() {
        for spec in [
            OneCycleSpec { max_lr: 0.0, ..OneCycleSpec::default() },
            OneCycleSpec { total_steps: 0, max_lr: 1e-3, ..OneCycleSpec::default() },
            OneCycleSpec { pct_start: 0.0, max_lr: 1e-3, total_steps: 10, ..OneCycleSpec::default() },
            OneCycleSpec { div_factor: 1.0, max_lr: 1e-3, total_steps: 10, ..OneCycleSpec::default() },
        ] {
            assert!(spec.validate().is_err(), "{spec:?}");
        }
    }

    #[test]
    fn early_stopping_behaviour() {
        // Strictly improving: never stops.
        let mut es = EarlyStopping::new(10, 1e-4);
        for i in 0..100 {
            assert!(!es.update(i as f64 * 0.01));
        }

        // Flat history of length patience + 1: stops on the last update.
        let mut es = EarlyStopping::new(10, 1e-4);
        assert!(!es.update(0.5));
        for _ in 0..9 {
            assert!(!es.update(0.5));
        }
        assert!(es.update(0.5));

        // Improvement resets the stale counter.
        let mut es = EarlyStopping::new(3, 1e-4);
        assert!(!es.update(0.5));
        assert!(!es.update(0.5));
        assert!(!es.update(0.5));
        assert!(!es.update(0.9));
        assert!(!es.update(0.9));
        assert!(!es.update(0.9));
        assert!(es.update(0.9));

        // A sub-threshold improvement does not reset.
        let mut es = EarlyStopping::new(2, 1e-2);
        assert!(!es.update(0.5));
        assert!(!es.update(0.505));
        assert!(es.update(0.5001));
    }
}
