//! Floating-base rigid-body model: a kinematic tree of links connected by
//! single-DoF revolute joints, plus the sensor placement and the upper/lower
//! joint partition the predictor architecture depends on.
//!
//! Models are parsed from a small plain-text description format (see
//! [`parse_model`] and the grammar notes in the repository README). The
//! bundled 20-DoF humanoid is available through [`reference_model`].

mod parse;

pub use parse::{parse_model, serialize_model};

use nalgebra::{DVector, Matrix3, Unit, Vector3};
use thiserror::Error;

/// Tolerance for the unit-axis check on joints.
pub const AXIS_UNIT_TOL: f64 = 1e-9;
/// Tolerance for rotation-matrix orthonormality checks on configurations.
pub const ROTATION_ORTHO_TOL: f64 = 1e-8;

/// Errors from model construction, parsing, and validation.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown link `{name}` referenced at line {line}")]
    UnknownLink { line: usize, name: String },
    #[error("unknown joint `{name}` referenced at line {line}")]
    UnknownJoint { line: usize, name: String },
    #[error("duplicate {kind} name `{name}` at line {line}")]
    DuplicateName {
        line: usize,
        kind: &'static str,
        name: String,
    },
    #[error("kinematic graph is not a tree: {reason}")]
    NotATree { reason: String },
    #[error("joint `{name}`: axis is not unit length (|axis| = {norm})")]
    NonUnitAxis { name: String, norm: f64 },
    #[error("joint `{name}`: invalid limits ({lower}, {upper})")]
    BadLimits {
        name: String,
        lower: f64,
        upper: f64,
    },
    #[error("missing `{section}` section")]
    MissingSection { section: &'static str },
    #[error("joint partition invalid: {reason}")]
    BadPartition { reason: String },
    #[error("instrumented link list invalid: {reason}")]
    BadInstrumented { reason: String },
    #[error("rotation matrix is not in SO(3) (max deviation {deviation})")]
    NotARotation { deviation: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
}

/// A rigid link. Geometry lives entirely in the joints; the link itself is a
/// named frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub name: String,
}

/// Joint kind. Only revolute joints are modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Revolute,
}

/// A single-DoF revolute joint connecting a parent link to a child link.
///
/// The child link frame is `parent_frame * origin * R(axis, angle)`, so the
/// child frame origin coincides with the joint anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub parent: usize,
    pub child: usize,
    pub origin_position: Vector3<f64>,
    pub origin_rotation: Matrix3<f64>,
    pub axis: Unit<Vector3<f64>>,
    pub kind: JointKind,
    /// (lower, upper) position limits in radians, lower < upper.
    pub limits: (f64, f64),
}

/// A validated floating-base kinematic tree.
///
/// Construction (via [`RigidBodyModel::new`] or [`parse_model`]) checks that
/// the parent/child graph is a tree rooted at the base link, that the
/// upper/lower sets exactly partition the joints, and that the instrumented
/// link list is valid. Immutable afterwards; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidBodyModel {
    name: String,
    links: Vec<LinkSpec>,
    joints: Vec<JointSpec>,
    base_link_index: usize,
    instrumented_links: Vec<usize>,
    upper_joints: Vec<usize>,
    lower_joints: Vec<usize>,
    // Derived: per-link parent joint (None for the base) and the joint chain
    // from the base to each link, in base-to-link order.
    parent_joint: Vec<Option<usize>>,
    chain_joints: Vec<Vec<usize>>,
    topo_links: Vec<usize>,
}

impl RigidBodyModel {
    /// Validate and assemble a model from its declared parts.
    pub fn new(
        name: String,
        links: Vec<LinkSpec>,
        joints: Vec<JointSpec>,
        base_link_index: usize,
        instrumented_links: Vec<usize>,
        upper_joints: Vec<usize>,
        lower_joints: Vec<usize>,
    ) -> Result<Self, ModelError> {
        let n_links = links.len();
        let n_joints = joints.len();
        if n_links == 0 {
            return Err(ModelError::NotATree {
                reason: "model has no links".into(),
            });
        }
        if n_links != n_joints + 1 {
            return Err(ModelError::NotATree {
                reason: format!("{n_links} links require exactly {} joints", n_links - 1),
            });
        }
        if base_link_index >= n_links {
            return Err(ModelError::NotATree {
                reason: format!("base link index {base_link_index} out of range"),
            });
        }

        for joint in &joints {
            let norm = joint.axis.as_ref().norm();
            if (norm - 1.0).abs() > AXIS_UNIT_TOL {
                return Err(ModelError::NonUnitAxis {
                    name: joint.name.clone(),
                    norm,
                });
            }
            if !(joint.limits.0 < joint.limits.1) {
                return Err(ModelError::BadLimits {
                    name: joint.name.clone(),
                    lower: joint.limits.0,
                    upper: joint.limits.1,
                });
            }
            if joint.parent >= n_links || joint.child >= n_links {
                return Err(ModelError::NotATree {
                    reason: format!("joint `{}` references a link out of range", joint.name),
                });
            }
            if joint.parent == joint.child {
                return Err(ModelError::NotATree {
                    reason: format!("joint `{}` connects a link to itself", joint.name),
                });
            }
        }

        // Every non-base link must be the child of exactly one joint.
        let mut parent_joint: Vec<Option<usize>> = vec![None; n_links];
        for (j, joint) in joints.iter().enumerate() {
            if joint.child == base_link_index {
                return Err(ModelError::NotATree {
                    reason: format!("joint `{}` has the base link as its child", joint.name),
                });
            }
            if parent_joint[joint.child].is_some() {
                return Err(ModelError::NotATree {
                    reason: format!("link `{}` has more than one parent joint", links[joint.child].name),
                });
            }
            parent_joint[joint.child] = Some(j);
        }
        for (l, pj) in parent_joint.iter().enumerate() {
            if l != base_link_index && pj.is_none() {
                return Err(ModelError::NotATree {
                    reason: format!("link `{}` is not connected to the base", links[l].name),
                });
            }
        }

        // Walk each link up to the base; a cycle or a dead end is a non-tree.
        let mut chain_joints: Vec<Vec<usize>> = vec![Vec::new(); n_links];
        for l in 0..n_links {
            let mut chain = Vec::new();
            let mut cur = l;
            let mut hops = 0usize;
            while cur != base_link_index {
                let j = parent_joint[cur].expect("non-base link has a parent joint");
                chain.push(j);
                cur = joints[j].parent;
                hops += 1;
                if hops > n_links {
                    return Err(ModelError::NotATree {
                        reason: format!("cycle detected through link `{}`", links[l].name),
                    });
                }
            }
            chain.reverse();
            chain_joints[l] = chain;
        }

        // Topological order: parents strictly before children.
        let mut topo_links: Vec<usize> = (0..n_links).collect();
        topo_links.sort_by_key(|&l| chain_joints[l].len());

        // Instrumented links: valid, pairwise distinct.
        let mut seen = vec![false; n_links];
        for &l in &instrumented_links {
            if l >= n_links {
                return Err(ModelError::BadInstrumented {
                    reason: format!("link index {l} out of range"),
                });
            }
            if seen[l] {
                return Err(ModelError::BadInstrumented {
                    reason: format!("link `{}` listed twice", links[l].name),
                });
            }
            seen[l] = true;
        }

        // upper ∪ lower must be exactly {0..n-1} with empty intersection.
        let mut owner = vec![0u8; n_joints];
        for &j in &upper_joints {
            if j >= n_joints {
                return Err(ModelError::BadPartition {
                    reason: format!("upper joint index {j} out of range"),
                });
            }
            owner[j] += 1;
        }
        for &j in &lower_joints {
            if j >= n_joints {
                return Err(ModelError::BadPartition {
                    reason: format!("lower joint index {j} out of range"),
                });
            }
            owner[j] += 1;
        }
        for (j, &count) in owner.iter().enumerate() {
            if count != 1 {
                return Err(ModelError::BadPartition {
                    reason: format!(
                        "joint `{}` appears {count} times across upper/lower",
                        joints[j].name
                    ),
                });
            }
        }

        Ok(Self {
            name,
            links,
            joints,
            base_link_index,
            instrumented_links,
            upper_joints,
            lower_joints,
            parent_joint,
            chain_joints,
            topo_links,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn links(&self) -> &[LinkSpec] {
        &self.links
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    /// Number of joint DoFs (`n`).
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn base_link_index(&self) -> usize {
        self.base_link_index
    }

    /// Indices of the sensor-bearing links, in declaration order.
    pub fn instrumented_links(&self) -> &[usize] {
        &self.instrumented_links
    }

    pub fn upper_joints(&self) -> &[usize] {
        &self.upper_joints
    }

    pub fn lower_joints(&self) -> &[usize] {
        &self.lower_joints
    }

    /// Parent joint of a link (`None` for the base link).
    pub fn parent_joint(&self, link: usize) -> Option<usize> {
        self.parent_joint[link]
    }

    /// Joint indices on the path from the base to `link`, base-first.
    pub fn chain_joints(&self, link: usize) -> &[usize] {
        &self.chain_joints[link]
    }

    /// Link indices ordered so every parent precedes its children.
    pub fn topo_links(&self) -> &[usize] {
        &self.topo_links
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Content hash of the canonical serialization, hex-encoded. Stable across
    /// re-parses; used to bind datasets and checkpoints to a model file.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(serialize_model(self).as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

/// System configuration q = (base position, base rotation, joint positions).
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    base_position: Vector3<f64>,
    base_rotation: Matrix3<f64>,
    joint_positions: DVector<f64>,
}

impl Configuration {
    /// Build a configuration, checking the rotation is in SO(3) and the joint
    /// vector is finite.
    pub fn new(
        base_position: Vector3<f64>,
        base_rotation: Matrix3<f64>,
        joint_positions: DVector<f64>,
    ) -> Result<Self, ModelError> {
        check_rotation(&base_rotation)?;
        if !base_position.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite {
                what: "base position",
            });
        }
        if !joint_positions.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite {
                what: "joint positions",
            });
        }
        Ok(Self {
            base_position,
            base_rotation,
            joint_positions,
        })
    }

    pub fn base_position(&self) -> &Vector3<f64> {
        &self.base_position
    }

    pub fn base_rotation(&self) -> &Matrix3<f64> {
        &self.base_rotation
    }

    pub fn joint_positions(&self) -> &DVector<f64> {
        &self.joint_positions
    }

    /// Same base pose with a replacement joint vector.
    pub fn with_joint_positions(&self, joint_positions: DVector<f64>) -> Result<Self, ModelError> {
        if !joint_positions.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite {
                what: "joint positions",
            });
        }
        Ok(Self {
            base_position: self.base_position,
            base_rotation: self.base_rotation,
            joint_positions,
        })
    }
}

/// System velocity ν = (base linear, base angular, joint velocities), all in
/// the inertial frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemVelocity {
    base_linear: Vector3<f64>,
    base_angular: Vector3<f64>,
    joint_velocities: DVector<f64>,
}

impl SystemVelocity {
    pub fn new(
        base_linear: Vector3<f64>,
        base_angular: Vector3<f64>,
        joint_velocities: DVector<f64>,
    ) -> Result<Self, ModelError> {
        let finite = base_linear.iter().all(|v| v.is_finite())
            && base_angular.iter().all(|v| v.is_finite())
            && joint_velocities.iter().all(|v| v.is_finite());
        if !finite {
            return Err(ModelError::NonFinite {
                what: "system velocity",
            });
        }
        Ok(Self {
            base_linear,
            base_angular,
            joint_velocities,
        })
    }

    pub fn zero(dof: usize) -> Self {
        Self {
            base_linear: Vector3::zeros(),
            base_angular: Vector3::zeros(),
            joint_velocities: DVector::zeros(dof),
        }
    }

    pub fn base_linear(&self) -> &Vector3<f64> {
        &self.base_linear
    }

    pub fn base_angular(&self) -> &Vector3<f64> {
        &self.base_angular
    }

    pub fn joint_velocities(&self) -> &DVector<f64> {
        &self.joint_velocities
    }

    pub fn with_joint_velocities(&self, joint_velocities: DVector<f64>) -> Result<Self, ModelError> {
        Self::new(self.base_linear, self.base_angular, joint_velocities)
    }
}

fn check_rotation(rotation: &Matrix3<f64>) -> Result<(), ModelError> {
    let gram = rotation.transpose() * rotation;
    let mut deviation: f64 = 0.0;
    for r in 0..3 {
        for c in 0..3 {
            let expected = if r == c { 1.0 } else { 0.0 };
            deviation = deviation.max((gram[(r, c)] - expected).abs());
        }
    }
    deviation = deviation.max((rotation.determinant() - 1.0).abs());
    if deviation > ROTATION_ORTHO_TOL || !deviation.is_finite() {
        return Err(ModelError::NotARotation { deviation });
    }
    Ok(())
}

/// Configuration with the base at the origin, identity rotation, and every
/// joint at zero (clamped into its limits where zero lies outside).
pub fn neutral_configuration(model: &RigidBodyModel) -> Configuration {
    let zeros = DVector::zeros(model.dof());
    let joints = clamp_to_limits(model, &zeros);
    Configuration {
        base_position: Vector3::zeros(),
        base_rotation: Matrix3::identity(),
        joint_positions: joints,
    }
}

/// Clamp each joint position into its limit interval. Idempotent; entries
/// already inside their interval pass through unchanged.
pub fn clamp_to_limits(model: &RigidBodyModel, positions: &DVector<f64>) -> DVector<f64> {
    assert_eq!(
        positions.len(),
        model.dof(),
        "joint vector length must match model DoF"
    );
    DVector::from_fn(model.dof(), |j, _| {
        let (lo, hi) = model.joints()[j].limits;
        positions[j].clamp(lo, hi)
    })
}

/// The bundled 20-DoF reference humanoid.
pub fn reference_model() -> RigidBodyModel {
    parse_model(REFERENCE_MODEL_TEXT).expect("bundled reference model parses")
}

/// Source text of the bundled reference model (the same file shipped at
/// `models/humanoid20.kcm`).
pub const REFERENCE_MODEL_TEXT: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../models/humanoid20.kcm"));
