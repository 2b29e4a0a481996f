//! Bound-constrained nonlinear least squares for inverse kinematics.
//!
//! The solver is a damped Gauss-Newton iteration with bound clamping: steps
//! are accepted only if they reduce the squared residual, so the residual
//! sequence over accepted iterations is non-increasing by construction, and
//! every iterate (including the returned one) lies inside the joint bounds.

use nalgebra::{DMatrix, DVector, Vector3};

use super::{forward_kinematics, jacobian, JointConfig, KinematicChain, KinematicsError, Pose};

/// Target for the IK objective. Position-only is the default mode; the
/// full-pose variant weighs the rotation residual (axis-angle, radians)
/// by `rotation_weight` before squaring.
#[derive(Debug, Clone)]
pub enum IkTarget {
    Position(Vector3<f64>),
    Pose { pose: Pose, rotation_weight: f64 },
}

#[derive(Debug, Clone)]
pub struct IkParams {
    /// Convergence threshold on the squared residual (m² for position
    /// targets).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IkParams {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IkResult {
    pub q: JointConfig,
    pub converged: bool,
    /// Norm of the final residual vector (meters for position targets).
    pub residual: f64,
    pub iterations: usize,
    /// Residual norm after the seed evaluation and after each accepted step.
    pub residual_history: Vec<f64>,
}

fn residual_vec(
    chain: &KinematicChain,
    q: &JointConfig,
    target: &IkTarget,
) -> Result<DVector<f64>, KinematicsError> {
    let pose = forward_kinematics(chain, q)?;
    Ok(match target {
        IkTarget::Position(p) => DVector::from_column_slice((pose.translation - p).as_slice()),
        IkTarget::Pose {
            pose: target_pose,
            rotation_weight,
        } => {
            let dp = pose.translation - target_pose.translation;
            let drot = pose.rotation * target_pose.rotation.transpose();
            let aa = nalgebra::Rotation3::from_matrix_unchecked(drot).scaled_axis();
            let mut r = DVector::zeros(6);
            r.fixed_rows_mut::<3>(0).copy_from(&dp);
            r.fixed_rows_mut::<3>(3).copy_from(&(aa * *rotation_weight));
            r
        }
    })
}

fn residual_jacobian(
    chain: &KinematicChain,
    q: &JointConfig,
    target: &IkTarget,
) -> Result<DMatrix<f64>, KinematicsError> {
    let geom = jacobian(chain, q)?;
    Ok(match target {
        IkTarget::Position(_) => geom.rows(0, 3).into_owned(),
        IkTarget::Pose {
            rotation_weight, ..
        } => {
            let mut j = geom;
            j.rows_mut(3, 3).scale_mut(*rotation_weight);
            j
        }
    })
}

/// Minimizes the squared pose/position error subject to joint bounds,
/// warm-started from `seed`. Returns the best iterate found; `converged`
/// is set when the squared residual reached `params.tol`.
pub fn solve_ik(
    chain: &KinematicChain,
    target: &IkTarget,
    seed: &JointConfig,
    params: &IkParams,
) -> Result<IkResult, KinematicsError> {
    if seed.len() != chain.dof() {
        return Err(KinematicsError::DimensionMismatch {
            expected: chain.dof(),
            got: seed.len(),
        });
    }
    if let Some(i) = seed
        .angles
        .iter()
        .zip(chain.lower_bounds.iter().zip(&chain.upper_bounds))
        .position(|(a, (lo, hi))| a < lo || a > hi)
    {
        return Err(KinematicsError::SeedOutOfBounds { joint: i });
    }

    let n = chain.dof();
    let mut q = seed.clone();
    let mut res = residual_vec(chain, &q, target)?;
    let mut cost = res.norm_squared();
    let mut lambda = 1e-4;
    let mut history = vec![res.norm()];
    let mut iterations = 0;

    for _ in 0..params.max_iter {
        if cost <= params.tol {
            break;
        }
        iterations += 1;

        let jac = residual_jacobian(chain, &q, target)?;
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &res;

        // Inner damping loop: retry with stronger damping until the step
        // improves the cost, then relax the damping again.
        let mut accepted = false;
        for _ in 0..16 {
            let mut damped = jtj.clone();
            for d in 0..n {
                damped[(d, d)] += lambda;
            }
            let step = match damped.clone().lu().solve(&(-&jtr)) {
                Some(s) => s,
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let candidate = JointConfig::new(
                q.angles
                    .iter()
                    .enumerate()
                    .map(|(i, a)| {
                        (a + step[i]).clamp(chain.lower_bounds[i], chain.upper_bounds[i])
                    })
                    .collect(),
            );
            let cand_res = residual_vec(chain, &candidate, target)?;
            let cand_cost = cand_res.norm_squared();
            if cand_cost < cost {
                q = candidate;
                res = cand_res;
                cost = cand_cost;
                history.push(cost.sqrt());
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // Stalled: no damping level improves the cost from here.
            break;
        }
    }

    Ok(IkResult {
        converged: cost <= params.tol,
        residual: cost.sqrt(),
        q,
        iterations,
        residual_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{Joint, KinematicChain};
    use nalgebra::{Unit, Vector3};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn arm7() -> KinematicChain {
        // Alternating axes, links stretched along x; reach ≈ 0.65 m.
        let axes = [
            Vector3::z(),
            Vector3::y(),
            Vector3::x(),
            Vector3::y(),
            Vector3::x(),
            Vector3::y(),
            Vector3::x(),
        ];
        let offsets = [0.05, 0.10, 0.10, 0.10, 0.10, 0.10, 0.05];
        let joints = axes
            .iter()
            .zip(offsets)
            .map(|(axis, dx)| Joint {
                origin: Pose::from_translation(Vector3::new(dx, 0.0, 0.0)),
                axis: Unit::new_normalize(*axis),
            })
            .collect();
        KinematicChain::new(
            joints,
            vec![-2.8; 7],
            vec![2.8; 7],
            Pose::from_translation(Vector3::new(0.05, 0.0, 0.0)),
        )
        .unwrap()
    }

    #[test]
    fn ik_fixed_point_returns_seed_equivalent() {
        let chain = arm7();
        let seed = JointConfig::new(vec![0.3, -0.4, 0.2, 0.5, -0.1, 0.3, 0.0]);
        let target = forward_kinematics(&chain, &seed).unwrap();
        let result = solve_ik(
            &chain,
            &IkTarget::Position(target.translation),
            &seed,
            &IkParams::default(),
        )
        .unwrap();
        assert!(result.converged);
        assert!(result.residual < 1e-10, "residual {}", result.residual);
        assert_eq!(result.iterations, 0);
    }

    #[test]
    fn ik_roundtrip_from_perturbed_seed() {
        let chain = arm7();
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let params = IkParams {
            tol: 1e-17,
            max_iter: 200,
        };
        for _ in 0..50 {
            let q_star = JointConfig::new(
                (0..7).map(|_| rng.random_range(-1.2..1.2)).collect::<Vec<_>>(),
            );
            let target = forward_kinematics(&chain, &q_star).unwrap().translation;
            let seed = JointConfig::new(
                q_star
                    .angles
                    .iter()
                    .map(|a| (a + rng.random_range(-0.15..0.15)).clamp(-2.8, 2.8))
                    .collect(),
            );
            let result =
                solve_ik(&chain, &IkTarget::Position(target), &seed, &params).unwrap();
            assert!(result.converged, "no convergence, residual {}", result.residual);
            assert!(result.residual < 1e-8, "residual {}", result.residual);
            assert!(chain.contains(&result.q));
            let reached = forward_kinematics(&chain, &result.q).unwrap().translation;
            assert!((reached - target).norm() < 1e-8);
        }
    }

    #[test]
    fn ik_residuals_non_increasing_and_in_bounds() {
        let chain = arm7();
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        for _ in 0..20 {
            let target = Vector3::new(
                rng.random_range(0.1..0.5),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            );
            let seed = JointConfig::zeros(7);
            let result = solve_ik(
                &chain,
                &IkTarget::Position(target),
                &seed,
                &IkParams::default(),
            )
            .unwrap();
            assert!(chain.contains(&result.q));
            for w in result.residual_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-15, "history not monotone: {w:?}");
            }
        }
    }

    #[test]
    fn ik_unreachable_target_reports_boundary_distance() {
        // Planar 2-link arm, reach 0.6 m, target 1.0 m out.
        let joints = vec![
            Joint {
                origin: Pose::identity(),
                axis: Unit::new_normalize(Vector3::z()),
            },
            Joint {
                origin: Pose::from_translation(Vector3::new(0.3, 0.0, 0.0)),
                axis: Unit::new_normalize(Vector3::z()),
            },
        ];
        let chain = KinematicChain::new(
            joints,
            vec![-3.1, -3.1],
            vec![3.1, 3.1],
            Pose::from_translation(Vector3::new(0.3, 0.0, 0.0)),
        )
        .unwrap();
        let target = Vector3::new(1.0, 0.0, 0.0);
        let result = solve_ik(
            &chain,
            &IkTarget::Position(target),
            &JointConfig::new(vec![0.4, -0.7]),
            &IkParams {
                tol: 1e-16,
                max_iter: 500,
            },
        )
        .unwrap();
        assert!(!result.converged);
        assert!(
            (result.residual - 0.4).abs() < 1e-6,
            "residual {} vs boundary distance 0.4",
            result.residual
        );
    }

    #[test]
    fn ik_full_pose_holds_orientation() {
        let chain = arm7();
        let q_star = JointConfig::new(vec![0.4, -0.5, 0.3, 0.7, -0.2, 0.4, 0.1]);
        let target = forward_kinematics(&chain, &q_star).unwrap();
        let seed = JointConfig::new(vec![0.3, -0.4, 0.2, 0.6, -0.1, 0.3, 0.0]);
        let result = solve_ik(
            &chain,
            &IkTarget::Pose {
                pose: target.clone(),
                rotation_weight: 1.0,
            },
            &seed,
            &IkParams {
                tol: 1e-18,
                max_iter: 300,
            },
        )
        .unwrap();
        assert!(result.converged, "residual {}", result.residual);
        let reached = forward_kinematics(&chain, &result.q).unwrap();
        assert!((reached.translation - target.translation).norm() < 1e-8);
        assert!((reached.rotation - target.rotation).norm() < 1e-7);
    }

    #[test]
    fn ik_rejects_out_of_bounds_seed() {
        let chain = arm7();
        let mut seed = JointConfig::zeros(7);
        seed.angles[2] = 3.5;
        let err = solve_ik(
            &chain,
            &IkTarget::Position(Vector3::new(0.3, 0.0, 0.0)),
            &seed,
            &IkParams::default(),
        )
        .unwrap_err();
        assert_eq!(err, KinematicsError::SeedOutOfBounds { joint: 2 });
    }
}
