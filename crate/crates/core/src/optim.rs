//! Adam over small named parameter groups with a windowed convergence rule.

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const DEFAULT_CONV_TOL: f64 = 1e-4;
pub const DEFAULT_WINDOW: usize = 10;
pub const FD_STEP_ROTATION: f64 = 1e-4;
pub const FD_STEP_TRANSLATION: f64 = 1e-4;
pub const FD_STEP_LOG_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Euclidean,
    /// Three values holding a rotation vector; updates compose on the left as `exp(δ)·R`.
    Rotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub values: Vec<f64>,
    pub learning_rate: f64,
    pub kind: GroupKind,
    /// Central-difference step used when this group has no analytic gradient.
    pub fd_step: f64,
}

impl ParamGroup {
    pub fn euclidean(name: &str, values: Vec<f64>, learning_rate: f64, fd_step: f64) -> Self {
        Self {
            name: name.to_string(),
            values,
            learning_rate,
            kind: GroupKind::Euclidean,
            fd_step,
        }
    }

    pub fn vec3(name: &str, v: &Vec3, learning_rate: f64, fd_step: f64) -> Self {
        Self::euclidean(name, v.as_slice().to_vec(), learning_rate, fd_step)
    }

    pub fn rotation(name: &str, q: &UnitQuaternion<f64>, learning_rate: f64) -> Self {
        Self {
            name: name.to_string(),
            values: q.scaled_axis().as_slice().to_vec(),
            learning_rate,
            kind: GroupKind::Rotation,
            fd_step: FD_STEP_ROTATION,
        }
    }

    pub fn as_vec3(&self) -> Vec3 {
        Vec3::new(self.values[0], self.values[1], self.values[2])
    }

    pub fn as_rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_scaled_axis(self.as_vec3())
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "group {}: learning rate must be positive, got {}",
                self.name, self.learning_rate
            )));
        }
        if self.kind == GroupKind::Rotation && self.values.len() != 3 {
            return Err(Error::LengthMismatch {
                expected: 3,
                actual: self.values.len(),
            });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("group {}", self.name)));
        }
        Ok(())
    }

    /// Applies an increment in the group's tangent space.
    fn retract(&mut self, delta: &[f64]) {
        match self.kind {
            GroupKind::Euclidean => self.values.iter_mut().zip(delta).for_each(|(v, d)| *v += d),
            GroupKind::Rotation => {
                let d = Vec3::new(delta[0], delta[1], delta[2]);
                let q = UnitQuaternion::from_scaled_axis(d) * self.as_rotation();
                self.values = q.scaled_axis().as_slice().to_vec();
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update of `group`; returns the applied increment.
pub fn adam_step(state: &mut AdamState, group: &mut ParamGroup, grad: &[f64]) -> Result<Vec<f64>> {
    if grad.len() != group.values.len() || state.first_moment.len() != grad.len() {
        return Err(Error::LengthMismatch {
            expected: group.values.len(),
            actual: grad.len(),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("group {} component {i}", group.name)));
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let mut delta = vec![0.0; grad.len()];
    for (i, &g) in grad.iter().enumerate() {
        let m = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
        let v = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        delta[i] = -group.learning_rate * (m / bc1) / ((v / bc2).sqrt() + eps);
    }
    group.retract(&delta);
    Ok(delta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOptions {
    pub max_iters: usize,
    pub conv_tol: f64,
    pub window: usize,
    pub adam: AdamConfig,
}

impl OptimizeOptions {
    pub fn with_cap(max_iters: usize) -> Self {
        Self {
            max_iters,
            conv_tol: DEFAULT_CONV_TOL,
            window: DEFAULT_WINDOW,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    pub groups: Vec<ParamGroup>,
    pub iterations: usize,
    /// Objective at the returned parameters.
    pub final_loss: f64,
    pub converged: bool,
}

/// Value plus analytic gradient, one vector per group (same lengths as the groups).
pub type AnalyticEval = (f64, Vec<Vec<f64>>);

/// The objective is `fd(groups) + analytic(groups)`: the first part is differentiated by
/// central differences, the second supplies its own gradient. Either may be absent.
pub struct Objective<'a> {
    pub fd: Option<Box<dyn FnMut(&[ParamGroup]) -> Result<f64> + 'a>>,
    pub analytic: Option<Box<dyn FnMut(&[ParamGroup]) -> Result<AnalyticEval> + 'a>>,
}

impl<'a> Objective<'a> {
    pub fn finite_difference(f: impl FnMut(&[ParamGroup]) -> Result<f64> + 'a) -> Self {
        Self {
            fd: Some(Box::new(f)),
            analytic: None,
        }
    }

    pub fn analytic(f: impl FnMut(&[ParamGroup]) -> Result<AnalyticEval> + 'a) -> Self {
        Self {
            fd: None,
            analytic: Some(Box::new(f)),
        }
    }

    pub fn value(&mut self, groups: &[ParamGroup]) -> Result<f64> {
        let mut v = 0.0;
        if let Some(f) = self.fd.as_mut() {
            v += f(groups)?;
        }
        if let Some(f) = self.analytic.as_mut() {
            v += f(groups)?.0;
        }
        Ok(v)
    }

    /// Objective value and full gradient at `groups`.
    pub fn value_and_grad(&mut self, groups: &[ParamGroup]) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut value = 0.0;
        let mut grad: Vec<Vec<f64>> = groups.iter().map(|g| vec![0.0; g.values.len()]).collect();
        if let Some(f) = self.fd.as_mut() {
            value += f(groups)?;
            let mut probe = groups.to_vec();
            for gi in 0..groups.len() {
                let h = groups[gi].fd_step;
                for j in 0..groups[gi].values.len() {
                    let mut e = vec![0.0; groups[gi].values.len()];
                    e[j] = h;
                    probe[gi].retract(&e);
                    let plus = f(&probe)?;
                    probe[gi] = groups[gi].clone();
                    e[j] = -h;
                    probe[gi].retract(&e);
                    let minus = f(&probe)?;
                    probe[gi] = groups[gi].clone();
                    grad[gi][j] += (plus - minus) / (2.0 * h);
                }
            }
        }
        if let Some(f) = self.analytic.as_mut() {
            let (v, g) = f(groups)?;
            value += v;
            for (acc, part) in grad.iter_mut().zip(g) {
                if acc.len() != part.len() {
                    return Err(Error::LengthMismatch {
                        expected: acc.len(),
                        actual: part.len(),
                    });
                }
                acc.iter_mut().zip(part).for_each(|(a, p)| *a += p);
            }
        }
        Ok((value, grad))
    }
}

/// Runs Adam (one state per group) until the moving average of the last `window`
/// parameter-change norms drops below `conv_tol`, or `max_iters` updates.
pub fn optimize(mut groups: Vec<ParamGroup>, opts: &OptimizeOptions, objective: &mut Objective) -> Result<OptimizeOutcome> {
    if opts.max_iters == 0 || opts.window == 0 {
        return Err(Error::InvalidConfig("max_iters and window must be ≥ 1".into()));
    }
    for g in &groups {
        g.validate()?;
    }
    let mut states: Vec<AdamState> = groups.iter().map(|g| AdamState::new(g.values.len(), opts.adam)).collect();
    let mut recent: std::collections::VecDeque<f64> = std::collections::VecDeque::with_capacity(opts.window);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iters {
        let (loss, grad) = objective.value_and_grad(&groups)?;
        check_finite(loss, &grad, &groups, iterations)?;
        // a stationary point: Adam would only amplify round-off into lr-sized steps
        if grad.iter().flatten().all(|g| g.abs() < opts.adam.eps) {
            iterations += 1;
            converged = true;
            break;
        }
        let mut sq = 0.0;
        for ((state, group), g) in states.iter_mut().zip(groups.iter_mut()).zip(&grad) {
            let delta = adam_step(state, group, g)?;
            sq += delta.iter().map(|d| d * d).sum::<f64>();
        }
        iterations += 1;
        if recent.len() == opts.window {
            recent.pop_front();
        }
        recent.push_back(sq.sqrt());
        if recent.len() == opts.window && recent.iter().sum::<f64>() / (opts.window as f64) < opts.conv_tol {
            converged = true;
            break;
        }
    }
    let final_loss = objective.value(&groups)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: iterations,
            detail: "objective at final parameters".into(),
        });
    }
    Ok(OptimizeOutcome {
        groups,
        iterations,
        final_loss,
        converged,
    })
}

fn check_finite(loss: f64, grad: &[Vec<f64>], groups: &[ParamGroup], iteration: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            detail: format!("value {loss} at {}", describe(groups)),
        });
    }
    for (g, group) in grad.iter().zip(groups) {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration,
                detail: format!("gradient of {} is {g:?} at {}", group.name, describe(groups)),
            });
        }
    }
    Ok(())
}

fn describe(groups: &[ParamGroup]) -> String {
    groups
        .iter()
        .map(|g| format!("{}={:?}", g.name, g.values))
        .collect::<Vec<_>>()
        .join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_analytic(a: f64) -> Objective<'static> {
        Objective::analytic(move |g: &[ParamGroup]| {
            let x = g[0].values[0];
            Ok(((x - a).powi(2), vec![vec![2.0 * (x - a)]]))
        })
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut s = AdamState::new(2, AdamConfig::default());
        let mut g = ParamGroup::euclidean("x", vec![1.0, 2.0], 1e-3, 1e-4);
        adam_step(&mut s, &mut g, &[0.0, 0.0]).unwrap();
        assert_eq!(g.values, vec![1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = AdamState::new(1, AdamConfig::default());
        let mut g = ParamGroup::euclidean("x", vec![0.0], 1e-3, 1e-4);
        adam_step(&mut s, &mut g, &[1.0]).unwrap();
        assert!((g.values[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut s = AdamState::new(1, AdamConfig::default());
        let mut g = ParamGroup::euclidean("x", vec![0.0], 1e-3, 1e-4);
        assert!(matches!(adam_step(&mut s, &mut g, &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(adam_step(&mut s, &mut g, &[f64::NAN]), Err(Error::NonFiniteGradient(_))));
    }

    #[test]
    fn constant_gradient_decreases_quadratic() {
        let mut s = AdamState::new(1, AdamConfig::default());
        let mut g = ParamGroup::euclidean("x", vec![1.0], 1e-2, 1e-4);
        let f = |x: f64| x * x;
        let f0 = f(g.values[0]);
        adam_step(&mut s, &mut g, &[2.0]).unwrap();
        let f1 = f(g.values[0]);
        adam_step(&mut s, &mut g, &[2.0]).unwrap();
        let f2 = f(g.values[0]);
        assert!(f0 > f1 && f1 > f2);
    }

    #[test]
    fn already_optimal_stops_at_once() {
        let groups = vec![ParamGroup::euclidean("x", vec![0.3], 1e-3, 1e-4)];
        let out = optimize(groups, &OptimizeOptions::with_cap(400), &mut quadratic_analytic(0.3)).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
        assert_eq!(out.groups[0].values[0], 0.3);
    }

    #[test]
    fn near_stationary_start_is_not_amplified() {
        // gradient 2e-10, far below eps: plain Adam would still take lr-sized steps soon
        let groups = vec![ParamGroup::euclidean("x", vec![0.3 + 1e-10], 1e-3, 1e-4)];
        let out = optimize(groups, &OptimizeOptions::with_cap(400), &mut quadratic_analytic(0.3)).unwrap();
        assert!(out.converged && out.iterations == 1);
        assert_eq!(out.groups[0].values[0], 0.3 + 1e-10);
    }

    /// Plain scalar Adam with the same stopping rule, written out longhand.
    fn scalar_adam_oracle(a: f64, lr: f64, cap: usize) -> (usize, f64) {
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut steps = Vec::new();
        for t in 1..=cap {
            let g = 2.0 * (x - a);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let d = lr * (m / (1.0 - 0.9f64.powi(t as i32))) / ((v / (1.0 - 0.999f64.powi(t as i32))).sqrt() + 1e-8);
            x -= d;
            steps.push(d.abs());
            if steps.len() >= 10 && steps[steps.len() - 10..].iter().sum::<f64>() / 10.0 < 1e-4 {
                return (t, x);
            }
        }
        (cap, x)
    }

    #[test]
    fn scalar_quadratic_reaches_minimum() {
        let a = 0.05;
        let groups = vec![ParamGroup::euclidean("x", vec![0.0], 1e-3, 1e-4)];
        let out = optimize(groups, &OptimizeOptions::with_cap(400), &mut quadratic_analytic(a)).unwrap();
        let (iters, x) = scalar_adam_oracle(a, 1e-3, 400);
        assert_eq!(out.iterations, iters);
        assert!((out.groups[0].values[0] - x).abs() < 1e-12);
        assert!(out.iterations <= 400);
        assert!((out.groups[0].values[0] - a).abs() < 1e-3, "{out:?}");
    }

    #[test]
    fn finite_difference_path_tracks_analytic_path() {
        let a = 0.15;
        let opts = OptimizeOptions::with_cap(300);
        let mut fd = Objective::finite_difference(move |g: &[ParamGroup]| Ok((g[0].values[0] - a).powi(2)));
        let x_fd = optimize(vec![ParamGroup::euclidean("x", vec![0.0], 1e-3, 1e-4)], &opts, &mut fd).unwrap();
        let x_an = optimize(vec![ParamGroup::euclidean("x", vec![0.0], 1e-3, 1e-4)], &opts, &mut quadratic_analytic(a)).unwrap();
        assert_eq!(x_fd.iterations, x_an.iterations);
        assert!((x_fd.groups[0].values[0] - x_an.groups[0].values[0]).abs() < 1e-6);
    }

    #[test]
    fn rotation_group_retracts_on_the_left() {
        let q0 = UnitQuaternion::from_euler_angles(0.3, -0.1, 0.2);
        let mut g = ParamGroup::rotation("r", &q0, 1.0);
        let d = Vec3::new(0.01, 0.02, -0.03);
        g.retract(d.as_slice());
        let expect = UnitQuaternion::from_scaled_axis(d) * q0;
        assert!(g.as_rotation().angle_to(&expect) < 1e-12);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut obj = Objective::finite_difference(|_: &[ParamGroup]| Ok(f64::NAN));
        let r = optimize(vec![ParamGroup::euclidean("x", vec![0.0], 1e-3, 1e-4)], &OptimizeOptions::with_cap(5), &mut obj);
        assert!(matches!(r, Err(Error::NonFiniteLoss { iteration: 0, .. })));
    }
}
