//! Cross-entropy-method planning over any [`TransitionModel`].

use mbcd_core::dynamics::TransitionModel;
use mbcd_core::environments::{maze_step, MazeSpec};
use mbcd_core::Scalar;
use ndarray::{Array1, Array2, ArrayView2};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    pub horizon: usize,
    pub candidates: usize,
    /// Fraction of candidates kept as elites each iteration.
    pub elite_fraction: f64,
    pub iterations: usize,
    pub init_std: f64,
    pub min_std: f64,
    /// Score plans with the true reward of the active context instead of the
    /// model's reward head.
    pub known_reward: bool,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            candidates: 1000,
            elite_fraction: 0.1,
            iterations: 10,
            init_std: 0.5,
            min_std: 0.05,
            known_reward: false,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.iterations == 0 {
            return Err(HarnessError::Config("CEM horizon and iterations must be >= 1".into()));
        }
        if self.elite_count() == 0 || self.elite_count() > self.candidates {
            return Err(HarnessError::Config(
                "CEM needs candidates >= elites >= 1 (check elite_fraction)".into(),
            ));
        }
        if !(self.init_std > 0.0) || self.min_std < 0.0 {
            return Err(HarnessError::Config("CEM std settings must be positive".into()));
        }
        Ok(())
    }

    pub fn elite_count(&self) -> usize {
        (self.elite_fraction * self.candidates as f64).ceil() as usize
    }
}

/// Deterministic maze dynamics behind the model interface.
#[derive(Debug, Clone)]
pub struct KnownMaze {
    pub spec: MazeSpec,
}

impl<S: Scalar> TransitionModel<S> for KnownMaze {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn sample_batch(
        &self,
        states: ArrayView2<S>,
        actions: ArrayView2<S>,
        _rng: &mut dyn RngCore,
    ) -> mbcd_core::Result<(Array2<S>, Array1<S>)> {
        let n = states.nrows();
        let mut next = Array2::zeros((n, 2));
        let mut rewards = Array1::zeros(n);
        for i in 0..n {
            let o = maze_step(
                &self.spec,
                [states[[i, 0]].as_f64(), states[[i, 1]].as_f64()],
                [actions[[i, 0]].as_f64(), actions[[i, 1]].as_f64()],
            );
            next[[i, 0]] = S::lit(o.next[0]);
            next[[i, 1]] = S::lit(o.next[1]);
            rewards[i] = S::lit(o.reward);
        }
        Ok((next, rewards))
    }
}

/// Mean and standard deviation of the `elites` best candidate sequences.
/// Rows of `candidates` are flattened action sequences.
pub fn cem_refit(candidates: &Array2<f64>, returns: &[f64], elites: usize) -> (Array1<f64>, Array1<f64>) {
    let mut order: Vec<usize> = (0..returns.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (returns[a], returns[b]);
        y.partial_cmp(&x).unwrap_or_else(|| x.is_nan().cmp(&y.is_nan()))
    });
    let d = candidates.ncols();
    let k = elites.clamp(1, returns.len());
    let mut mean = Array1::zeros(d);
    for &i in &order[..k] {
        mean += &candidates.row(i);
    }
    mean /= k as f64;
    let mut var = Array1::<f64>::zeros(d);
    for &i in &order[..k] {
        let diff = &candidates.row(i) - &mean;
        var += &(&diff * &diff);
    }
    var /= k as f64;
    (mean, var.mapv(f64::sqrt))
}

/// Plans from `state` and returns the first action of the final mean plan.
/// With `reward` set, plans are scored by it on predicted next states.
pub fn mpc_act<S, M>(
    model: &M,
    state: &[f64],
    reward: Option<&dyn Fn(&[f64]) -> f64>,
    cfg: &CemConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>>
where
    S: Scalar,
    M: TransitionModel<S> + ?Sized,
{
    let plan = cem_plan(model, state, reward, cfg, rng)?;
    Ok(plan.iter().take(model.action_dim()).copied().collect())
}

/// Final CEM mean over the whole horizon, flattened step-major and clamped
/// to the action box.
pub fn cem_plan<S, M>(
    model: &M,
    state: &[f64],
    reward: Option<&dyn Fn(&[f64]) -> f64>,
    cfg: &CemConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>>
where
    S: Scalar,
    M: TransitionModel<S> + ?Sized,
{
    cfg.validate()?;
    let (sd, ad) = (model.state_dim(), model.action_dim());
    if state.len() != sd {
        return Err(mbcd_core::Error::DimensionMismatch {
            context: "planning state",
            expected: sd,
            actual: state.len(),
        }
        .into());
    }
    let (h, n) = (cfg.horizon, cfg.candidates);
    let mut mean = Array1::<f64>::zeros(h * ad);
    let mut std = Array1::<f64>::from_elem(h * ad, cfg.init_std);
    // Candidates are refit unclamped so the mean can settle on the action
    // bounds; only the executed actions are clamped.
    let mut plans = Array2::<f64>::zeros((n, h * ad));
    for _ in 0..cfg.iterations {
        for mut row in plans.rows_mut() {
            for j in 0..h * ad {
                let e: f64 = StandardNormal.sample(rng);
                row[j] = mean[j] + std[j] * e;
            }
        }
        let mut states = Array2::<S>::zeros((n, sd));
        for mut row in states.rows_mut() {
            for (j, &v) in state.iter().enumerate() {
                row[j] = S::lit(v);
            }
        }
        let mut returns = vec![0.0; n];
        for step in 0..h {
            let actions = plans
                .slice(ndarray::s![.., step * ad..(step + 1) * ad])
                .mapv(|v| S::lit(v.clamp(-1.0, 1.0)));
            let (next, r) = model.sample_batch(states.view(), actions.view(), rng)?;
            for i in 0..n {
                returns[i] += match reward {
                    Some(f) => {
                        let s: Vec<f64> = next.row(i).iter().map(|v| v.as_f64()).collect();
                        f(&s)
                    }
                    None => r[i].as_f64(),
                };
            }
            states = next;
        }
        let (m, s) = cem_refit(&plans, &returns, cfg.elite_count());
        mean = m;
        std = s.mapv(|v| v.max(cfg.min_std));
    }
    Ok(mean.iter().map(|v| v.clamp(-1.0, 1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mbcd_core::environments::Wall;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_elite_fraction_refits_to_plain_mean() {
        let c = Array2::from_shape_vec((4, 2), vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let (m, s) = cem_refit(&c, &[1.0, -3.0, 2.0, 0.0], 4);
        assert_eq!(m.to_vec(), vec![3.0, 4.0]);
        assert!((s[0] - 5.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn elites_pick_the_better_cluster() {
        let mut rows = Vec::new();
        let mut returns = Vec::new();
        for i in 0..10 {
            let jitter = 0.01 * i as f64;
            rows.extend([0.8 + jitter, -0.5]);
            returns.push(1.0);
            rows.extend([-0.8 - jitter, 0.5]);
            returns.push(-1.0);
        }
        let c = Array2::from_shape_vec((20, 2), rows).unwrap();
        let (m, _) = cem_refit(&c, &returns, 10);
        assert!((m[0] - 0.845).abs() < 1e-9);
        assert_eq!(m[1], -0.5);
    }

    #[test]
    fn horizon_one_moves_toward_goal() {
        let model = KnownMaze {
            spec: MazeSpec {
                goal: [3.0, -2.0],
                ..MazeSpec::default()
            },
        };
        let cfg = CemConfig {
            horizon: 1,
            candidates: 200,
            ..CemConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = mpc_act::<f64, _>(&model, &[0.0, 0.0], None, &cfg, &mut rng).unwrap();
        assert!(a[0] > 0.8 && a[1] < -0.8, "{a:?}");
    }

    #[test]
    fn known_reward_overrides_model_reward() {
        let model = KnownMaze {
            spec: MazeSpec::default(),
        };
        let cfg = CemConfig {
            horizon: 1,
            candidates: 200,
            ..CemConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let go_left = |s: &[f64]| -s[0];
        let a = mpc_act::<f64, _>(&model, &[0.0, 0.0], Some(&go_left), &cfg, &mut rng).unwrap();
        assert!(a[0] < -0.8, "{a:?}");
    }

    #[test]
    fn rejects_bad_settings() {
        let model = KnownMaze {
            spec: MazeSpec {
                walls: vec![Wall::vertical(1.0, -1.0, 1.0)],
                ..MazeSpec::default()
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = CemConfig {
            horizon: 0,
            ..CemConfig::default()
        };
        assert!(mpc_act::<f64, _>(&model, &[0.0, 0.0], None, &bad, &mut rng).is_err());
        let bad = CemConfig {
            elite_fraction: 0.0,
            ..CemConfig::default()
        };
        assert!(mpc_act::<f64, _>(&model, &[0.0, 0.0], None, &bad, &mut rng).is_err());
        let ok = CemConfig::default();
        assert!(mpc_act::<f64, _>(&model, &[0.0], None, &ok, &mut rng).is_err());
    }
}
