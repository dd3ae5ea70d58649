//! Forward and differential kinematics on the floating-base tree, plus the
//! closed-form reverse-mode derivatives the training losses and the runtime
//! refinement step rely on.
//!
//! Conventions: all quantities are expressed in the inertial frame. A link
//! twist pairs the linear velocity of the link-frame origin with the link
//! angular velocity. Joint `j`'s anchor point is the origin of its child
//! link frame, and its world axis is the joint axis rotated into the inertial
//! frame by the parent side of the joint (so neither depends on `s_j`
//! itself).

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, Vector3, Vector6};

use crate::model::{Configuration, RigidBodyModel, SystemVelocity};

/// Pose of one link frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkPose {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

/// Twist of one link frame: linear velocity of the origin, angular velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkTwist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl LinkTwist {
    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        )
    }
}

/// Result of a forward-kinematics pass: every link pose plus the world-frame
/// joint axes and anchor points the derivative formulas consume.
#[derive(Debug, Clone)]
pub struct ForwardKinematics {
    base_position: Vector3<f64>,
    poses: Vec<LinkPose>,
    joint_axes: Vec<Vector3<f64>>,
    joint_anchors: Vec<Vector3<f64>>,
}

impl ForwardKinematics {
    pub fn pose(&self, link: usize) -> &LinkPose {
        &self.poses[link]
    }

    pub fn poses(&self) -> &[LinkPose] {
        &self.poses
    }

    /// World-frame rotation axis of joint `j`.
    pub fn joint_axis(&self, joint: usize) -> &Vector3<f64> {
        &self.joint_axes[joint]
    }

    /// World-frame anchor point of joint `j` (its child link origin).
    pub fn joint_anchor(&self, joint: usize) -> &Vector3<f64> {
        &self.joint_anchors[joint]
    }

    pub fn base_position(&self) -> &Vector3<f64> {
        &self.base_position
    }
}

/// Compute all link poses for configuration `q`.
pub fn forward_kinematics(model: &RigidBodyModel, q: &Configuration) -> ForwardKinematics {
    assert_eq!(
        q.joint_positions().len(),
        model.dof(),
        "joint vector length must match model DoF"
    );
    let n_links = model.num_links();
    let mut poses = vec![
        LinkPose {
            position: Vector3::zeros(),
            rotation: Matrix3::identity(),
        };
        n_links
    ];
    let mut joint_axes = vec![Vector3::zeros(); model.dof()];
    let mut joint_anchors = vec![Vector3::zeros(); model.dof()];

    poses[model.base_link_index()] = LinkPose {
        position: *q.base_position(),
        rotation: *q.base_rotation(),
    };

    for &link in model.topo_links() {
        let Some(j) = model.parent_joint(link) else {
            continue;
        };
        let joint = &model.joints()[j];
        let parent = &poses[joint.parent];
        let anchor = parent.position + parent.rotation * joint.origin_position;
        let pre_rotation = parent.rotation * joint.origin_rotation;
        let axis_world = pre_rotation * joint.axis.into_inner();
        let angle = q.joint_positions()[j];
        let spin = Rotation3::from_axis_angle(&joint.axis, angle).into_inner();
        poses[link] = LinkPose {
            position: anchor,
            rotation: pre_rotation * spin,
        };
        joint_axes[j] = axis_world;
        joint_anchors[j] = anchor;
    }

    ForwardKinematics {
        base_position: *q.base_position(),
        poses,
        joint_axes,
        joint_anchors,
    }
}

/// Twist of a single link under system velocity `nu`, evaluated at the poses
/// in `fk`. Equals `link_jacobian(model, fk, link) * nu`.
pub fn differential_kinematics(
    model: &RigidBodyModel,
    fk: &ForwardKinematics,
    nu: &SystemVelocity,
    link: usize,
) -> LinkTwist {
    let p_i = fk.pose(link).position;
    let mut linear = nu.base_linear() + nu.base_angular().cross(&(p_i - fk.base_position()));
    let mut angular = *nu.base_angular();
    for &j in model.chain_joints(link) {
        let sdot = nu.joint_velocities()[j];
        let axis = fk.joint_axis(j);
        linear += sdot * axis.cross(&(p_i - fk.joint_anchor(j)));
        angular += sdot * axis;
    }
    LinkTwist { linear, angular }
}

/// Jacobian of the twist of `link` with respect to the system velocity:
/// a 6 x (6 + n) matrix with rows (linear; angular) and columns (base
/// linear; base angular; joint velocities). Columns for joints off the chain
/// to `link` are zero.
pub fn link_jacobian(
    model: &RigidBodyModel,
    fk: &ForwardKinematics,
    link: usize,
) -> DMatrix<f64> {
    let n = model.dof();
    let mut jac = DMatrix::zeros(6, 6 + n);
    let p_i = fk.pose(link).position;
    let r = p_i - fk.base_position();
    for k in 0..3 {
        jac[(k, k)] = 1.0;
        jac[(3 + k, 3 + k)] = 1.0;
    }
    let neg_skew = -skew(&r);
    jac.view_mut((0, 3), (3, 3)).copy_from(&neg_skew);
    for &j in model.chain_joints(link) {
        let axis = fk.joint_axis(j);
        let lin = axis.cross(&(p_i - fk.joint_anchor(j)));
        for k in 0..3 {
            jac[(k, 6 + j)] = lin[k];
            jac[(3 + k, 6 + j)] = axis[k];
        }
    }
    jac
}

/// Vector-Jacobian product of forward kinematics for one link: the gradient
/// with respect to the joint positions of
/// `dot(p_bar, p_link) + frobenius(r_bar, R_link)`.
pub fn vjp_fk(
    model: &RigidBodyModel,
    fk: &ForwardKinematics,
    link: usize,
    p_bar: &Vector3<f64>,
    r_bar: &Matrix3<f64>,
) -> DVector<f64> {
    let mut grad = DVector::zeros(model.dof());
    let p_i = fk.pose(link).position;
    let r_i = fk.pose(link).rotation;
    // <r_bar, skew(a) R> = a . axial(r_bar R^T - R r_bar^T) where axial
    // extracts the vector of an antisymmetric matrix; computed directly.
    let m = r_bar * r_i.transpose();
    let rot_vec = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    for &k in model.chain_joints(link) {
        let axis = fk.joint_axis(k);
        let dp = axis.cross(&(p_i - fk.joint_anchor(k)));
        grad[k] = p_bar.dot(&dp) + axis.dot(&rot_vec);
    }
    grad
}

/// Jacobians of one link twist with respect to the joint state, holding the
/// base twist fixed: `(d twist / d s, d twist / d sdot)`, each 6 x n with
/// rows (linear; angular).
pub fn dk_state_jacobian(
    model: &RigidBodyModel,
    fk: &ForwardKinematics,
    nu: &SystemVelocity,
    link: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = model.dof();
    let mut d_s = DMatrix::zeros(6, n);
    let mut d_sdot = DMatrix::zeros(6, n);
    let p_i = fk.pose(link).position;
    let chain = model.chain_joints(link);

    for (pos_k, &k) in chain.iter().enumerate() {
        let a_k = *fk.joint_axis(k);
        let r_ik = p_i - fk.joint_anchor(k);
        let dp_k = a_k.cross(&r_ik);

        for row in 0..3 {
            d_sdot[(row, k)] = dp_k[row];
            d_sdot[(3 + row, k)] = a_k[row];
        }

        // d twist / d s_k: the base angular term plus every joint term whose
        // axis, anchor, or lever arm moves with s_k.
        let mut lin = nu.base_angular().cross(&dp_k);
        let mut ang = Vector3::zeros();
        for (pos_j, &j) in chain.iter().enumerate() {
            let sdot_j = nu.joint_velocities()[j];
            if sdot_j == 0.0 {
                continue;
            }
            let a_j = *fk.joint_axis(j);
            if pos_j <= pos_k {
                // Joint j is at or upstream of k: only the lever arm to the
                // link origin changes.
                lin += sdot_j * a_j.cross(&dp_k);
            } else {
                // Joint j is downstream of k: its axis and anchor both rotate
                // about a_k.
                let r_ij = p_i - fk.joint_anchor(j);
                let da_j = a_k.cross(&a_j);
                lin += sdot_j * (da_j.cross(&r_ij) + a_j.cross(&a_k.cross(&r_ij)));
                ang += sdot_j * da_j;
            }
        }
        for row in 0..3 {
            d_s[(row, k)] = lin[row];
            d_s[(3 + row, k)] = ang[row];
        }
    }
    (d_s, d_sdot)
}

/// Vector-Jacobian product of differential kinematics for one link: gradients
/// with respect to joint positions and joint velocities of `dot(c, twist)`,
/// holding the base twist fixed.
pub fn vjp_dk(
    model: &RigidBodyModel,
    fk: &ForwardKinematics,
    nu: &SystemVelocity,
    link: usize,
    c: &Vector6<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let (d_s, d_sdot) = dk_state_jacobian(model, fk, nu, link);
    let grad_s = d_s.transpose() * c;
    let grad_sdot = d_sdot.transpose() * c;
    (
        DVector::from_column_slice(grad_s.as_slice()),
        DVector::from_column_slice(grad_sdot.as_slice()),
    )
}

/// Squared Frobenius distance between two rotation matrices.
pub fn orientation_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let d = a - b;
    d.iter().map(|x| x * x).sum()
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a.transpose() * b;
    // atan2 of the axial (2 sin) and trace (1 + 2 cos) parts: equivalent to
    // acos((tr - 1)/2) but exact for equal inputs (the relative rotation is
    // then exactly symmetric) and well-conditioned near zero.
    let sin2 = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
    .norm();
    let cos2 = m.trace() - 1.0;
    sin2.atan2(cos2)
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix about a unit axis, exposed for sensor-noise simulation.
pub fn axis_angle(axis: &Unit<Vector3<f64>>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(axis, angle).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_model, reference_model, Configuration, SystemVelocity};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn planar_two_link() -> RigidBodyModel {
        let text = "model planar2\nlink base\nlink l1\nlink l2\n\
            joint j1 parent=base child=l1 origin=0,0,0 axis=0,0,1 limits=-3.1,3.1\n\
            joint j2 parent=l1 child=l2 origin=1,0,0 axis=0,0,1 limits=-3.1,3.1\n\
            base base\ninstrumented l2\nupper j1 j2\n";
        parse_model(text).unwrap()
    }

    fn config(s: &[f64]) -> Configuration {
        Configuration::new(
            Vector3::zeros(),
            Matrix3::identity(),
            DVector::from_column_slice(s),
        )
        .unwrap()
    }

    fn random_state(
        model: &RigidBodyModel,
        rng: &mut ChaCha8Rng,
    ) -> (Configuration, SystemVelocity) {
        let n = model.dof();
        let s = DVector::from_fn(n, |j, _| {
            let (lo, hi) = model.joints()[j].limits;
            rng.gen_range(lo.max(-1.2)..hi.min(1.2))
        });
        let axis = Unit::new_normalize(Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ));
        let rot = Rotation3::from_axis_angle(&axis, rng.gen_range(-1.0..1.0)).into_inner();
        let pos = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let q = Configuration::new(pos, rot, s).unwrap();
        let nu = SystemVelocity::new(
            Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
            Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
            DVector::from_fn(n, |_, _| rng.gen_range(-1.5..1.5)),
        )
        .unwrap();
        (q, nu)
    }

    #[test]
    fn planar_arm_poses() {
        let model = planar_two_link();
        let l2 = model.link_index("l2").unwrap();

        let fk = forward_kinematics(&model, &config(&[0.0, 0.0]));
        assert_relative_eq!(fk.pose(l2).position, Vector3::new(1.0, 0.0, 0.0));

        let half_pi = std::f64::consts::FRAC_PI_2;
        let fk = forward_kinematics(&model, &config(&[half_pi, 0.0]));
        assert_relative_eq!(
            fk.pose(l2).position,
            Vector3::new(0.0, 1.0, 0.0),
            epsilon = 1e-12
        );
        // Orientation of l2 composes both joint angles.
        let fk = forward_kinematics(&model, &config(&[0.3, 0.4]));
        let expected =
            Rotation3::from_axis_angle(&Vector3::z_axis(), 0.7).into_inner();
        assert_relative_eq!(fk.pose(l2).rotation, expected, epsilon = 1e-12);
    }

    #[test]
    fn planar_arm_twist_analytic() {
        let model = planar_two_link();
        let l2 = model.link_index("l2").unwrap();
        let q = config(&[0.0, 0.0]);
        let fk = forward_kinematics(&model, &q);
        let nu = SystemVelocity::new(
            Vector3::zeros(),
            Vector3::zeros(),
            DVector::from_column_slice(&[1.0, 0.5]),
        )
        .unwrap();
        let twist = differential_kinematics(&model, &fk, &nu, l2);
        // l2 origin sits at the second anchor: only joint 1 moves it.
        assert_relative_eq!(twist.linear, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(twist.angular, Vector3::new(0.0, 0.0, 1.5), epsilon = 1e-12);
    }

    #[test]
    fn twist_equals_jacobian_times_velocity() {
        let model = reference_model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let (q, nu) = random_state(&model, &mut rng);
            let fk = forward_kinematics(&model, &q);
            let mut nu_vec = DVector::zeros(6 + model.dof());
            for k in 0..3 {
                nu_vec[k] = nu.base_linear()[k];
                nu_vec[3 + k] = nu.base_angular()[k];
            }
            for j in 0..model.dof() {
                nu_vec[6 + j] = nu.joint_velocities()[j];
            }
            for link in 0..model.num_links() {
                let jac = link_jacobian(&model, &fk, link);
                let via_jac = &jac * &nu_vec;
                let twist = differential_kinematics(&model, &fk, &nu, link).as_vector();
                for k in 0..6 {
                    assert_relative_eq!(via_jac[k], twist[k], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = reference_model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, _) = random_state(&model, &mut rng);
        let h = 1e-6;
        let links = [
            model.link_index("left_forearm").unwrap(),
            model.link_index("right_lower_leg").unwrap(),
            model.link_index("torso").unwrap(),
        ];
        for &link in &links {
            let fk = forward_kinematics(&model, &q);
            let jac = link_jacobian(&model, &fk, link);
            // Joint columns: perturb each joint position.
            for j in 0..model.dof() {
                let mut plus = q.joint_positions().clone();
                let mut minus = q.joint_positions().clone();
                plus[j] += h;
                minus[j] -= h;
                let fk_p = forward_kinematics(&model, &q.with_joint_positions(plus).unwrap());
                let fk_m = forward_kinematics(&model, &q.with_joint_positions(minus).unwrap());
                let dp = (fk_p.pose(link).position - fk_m.pose(link).position) / (2.0 * h);
                for k in 0..3 {
                    assert_relative_eq!(jac[(k, 6 + j)], dp[k], epsilon = 1e-6);
                }
                // Angular column via rotation derivative: dR R^T = skew(w).
                let dr = (fk_p.pose(link).rotation - fk_m.pose(link).rotation) / (2.0 * h);
                let w_mat = dr * fk.pose(link).rotation.transpose();
                let w = Vector3::new(w_mat[(2, 1)], w_mat[(0, 2)], w_mat[(1, 0)]);
                for k in 0..3 {
                    assert_relative_eq!(jac[(3 + k, 6 + j)], w[k], epsilon = 1e-6);
                }
            }
            // Base angular columns: premultiply the base rotation by a small
            // rotation about each inertial axis.
            for axis_idx in 0..3 {
                let mut w = Vector3::zeros();
                w[axis_idx] = 1.0;
                let delta = Rotation3::from_scaled_axis(w * h).into_inner();
                let q_p = Configuration::new(
                    *q.base_position(),
                    delta * q.base_rotation(),
                    q.joint_positions().clone(),
                )
                .unwrap();
                let q_m = Configuration::new(
                    *q.base_position(),
                    delta.transpose() * q.base_rotation(),
                    q.joint_positions().clone(),
                )
                .unwrap();
                let fk_p = forward_kinematics(&model, &q_p);
                let fk_m = forward_kinematics(&model, &q_m);
                let dp = (fk_p.pose(link).position - fk_m.pose(link).position) / (2.0 * h);
                for k in 0..3 {
                    assert_relative_eq!(jac[(k, 3 + axis_idx)], dp[k], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn vjp_fk_matches_finite_differences() {
        let model = reference_model();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..3 {
            let (q, _) = random_state(&model, &mut rng);
            let link = [
                model.link_index("left_forearm").unwrap(),
                model.link_index("right_lower_leg").unwrap(),
                model.link_index("pelvis").unwrap(),
            ][trial];
            let p_bar = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let r_bar = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let fk = forward_kinematics(&model, &q);
            let grad = vjp_fk(&model, &fk, link, &p_bar, &r_bar);
            let h = 1e-6;
            for j in 0..model.dof() {
                let mut plus = q.joint_positions().clone();
                let mut minus = q.joint_positions().clone();
                plus[j] += h;
                minus[j] -= h;
                let scalar = |s: DVector<f64>| {
                    let fk = forward_kinematics(&model, &q.with_joint_positions(s).unwrap());
                    p_bar.dot(&fk.pose(link).position)
                        + (r_bar.transpose() * fk.pose(link).rotation).trace()
                };
                let fd = (scalar(plus) - scalar(minus)) / (2.0 * h);
                assert_relative_eq!(grad[j], fd, epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn vjp_dk_matches_finite_differences() {
        let model = reference_model();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..3 {
            let (q, nu) = random_state(&model, &mut rng);
            let link = [
                model.link_index("left_forearm").unwrap(),
                model.link_index("right_lower_leg").unwrap(),
                model.link_index("torso").unwrap(),
            ][trial];
            let c = Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let fk = forward_kinematics(&model, &q);
            let (grad_s, grad_sdot) = vjp_dk(&model, &fk, &nu, link, &c);
            let h = 1e-6;
            let scalar = |s: DVector<f64>, sdot: DVector<f64>| {
                let q2 = q.with_joint_positions(s).unwrap();
                let nu2 = nu.with_joint_velocities(sdot).unwrap();
                let fk2 = forward_kinematics(&model, &q2);
                c.dot(&differential_kinematics(&model, &fk2, &nu2, link).as_vector())
            };
            for j in 0..model.dof() {
                let mut plus = q.joint_positions().clone();
                let mut minus = q.joint_positions().clone();
                plus[j] += h;
                minus[j] -= h;
                let fd = (scalar(plus, nu.joint_velocities().clone())
                    - scalar(minus, nu.joint_velocities().clone()))
                    / (2.0 * h);
                assert_relative_eq!(grad_s[j], fd, epsilon = 1e-5, max_relative = 1e-5);

                let mut vplus = nu.joint_velocities().clone();
                let mut vminus = nu.joint_velocities().clone();
                vplus[j] += h;
                vminus[j] -= h;
                let fd = (scalar(q.joint_positions().clone(), vplus)
                    - scalar(q.joint_positions().clone(), vminus))
                    / (2.0 * h);
                assert_relative_eq!(grad_sdot[j], fd, epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn orientation_distance_examples() {
        let id = Matrix3::identity();
        assert_eq!(orientation_distance(&id, &id), 0.0);
        let pi = std::f64::consts::PI;
        let flip = Rotation3::from_axis_angle(&Vector3::z_axis(), pi).into_inner();
        assert_relative_eq!(orientation_distance(&id, &flip), 8.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_angle_examples() {
        let id = Matrix3::identity();
        let r = Rotation3::from_axis_angle(&Vector3::x_axis(), 0.25).into_inner();
        assert_relative_eq!(rotation_angle(&id, &r), 0.25, epsilon = 1e-10);
        assert_relative_eq!(rotation_angle(&r, &r), 0.0, epsilon = 1e-7);
    }

    #[test]
    fn off_chain_columns_are_zero() {
        let model = reference_model();
        let q = crate::model::neutral_configuration(&model);
        let fk = forward_kinematics(&model, &q);
        let left_leg = model.link_index("left_lower_leg").unwrap();
        let jac = link_jacobian(&model, &fk, left_leg);
        for j in 0..model.dof() {
            if !model.chain_joints(left_leg).contains(&j) {
                for k in 0..6 {
                    assert_eq!(jac[(k, 6 + j)], 0.0);
                }
            }
        }
    }
}
