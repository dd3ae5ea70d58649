//! Plain-text model description parser and canonical serializer.
//!
//! One directive per line; `#` starts a comment. Directives:
//!
//! ```text
//! model NAME
//! link NAME
//! joint NAME parent=LINK child=LINK origin=X,Y,Z axis=X,Y,Z limits=LO,HI [rpy=R,P,Y]
//! base LINK
//! instrumented LINK...
//! upper JOINT...
//! lower JOINT...
//! ```
//!
//! `rpy` is an intrinsic roll-pitch-yaw (XYZ) rotation of the joint origin
//! frame, in radians; omitted means identity. `instrumented`, `upper`, and
//! `lower` may repeat; their lists accumulate in order.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use super::{JointKind, JointSpec, LinkSpec, ModelError, RigidBodyModel};

struct PendingJoint {
    line: usize,
    name: String,
    parent: String,
    child: String,
    origin_position: Vector3<f64>,
    origin_rotation: Matrix3<f64>,
    axis: Vector3<f64>,
    limits: (f64, f64),
}

/// Parse a model description. See the module docs for the grammar.
pub fn parse_model(text: &str) -> Result<RigidBodyModel, ModelError> {
    let mut name: Option<String> = None;
    let mut links: Vec<LinkSpec> = Vec::new();
    let mut pending_joints: Vec<PendingJoint> = Vec::new();
    let mut base: Option<(usize, String)> = None;
    let mut instrumented: Vec<(usize, String)> = Vec::new();
    let mut upper: Vec<(usize, String)> = Vec::new();
    let mut lower: Vec<(usize, String)> = Vec::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        };
        let mut tokens = line.split_whitespace();
        let Some(directive) = tokens.next() else {
            continue;
        };
        let rest: Vec<&str> = tokens.collect();
        match directive {
            "model" => {
                let value = expect_one(line_no, "model", &rest)?;
                name = Some(value.to_string());
            }
            "link" => {
                let value = expect_one(line_no, "link", &rest)?;
                if links.iter().any(|l| l.name == value) {
                    return Err(ModelError::DuplicateName {
                        line: line_no,
                        kind: "link",
                        name: value.to_string(),
                    });
                }
                links.push(LinkSpec {
                    name: value.to_string(),
                });
            }
            "joint" => {
                pending_joints.push(parse_joint(line_no, &rest, &pending_joints)?);
            }
            "base" => {
                let value = expect_one(line_no, "base", &rest)?;
                if base.is_some() {
                    return Err(syntax(line_no, "duplicate `base` directive"));
                }
                base = Some((line_no, value.to_string()));
            }
            "instrumented" => {
                for tok in &rest {
                    instrumented.push((line_no, tok.to_string()));
                }
            }
            "upper" => {
                for tok in &rest {
                    upper.push((line_no, tok.to_string()));
                }
            }
            "lower" => {
                for tok in &rest {
                    lower.push((line_no, tok.to_string()));
                }
            }
            other => {
                return Err(syntax(line_no, &format!("unknown directive `{other}`")));
            }
        }
    }

    let name = name.unwrap_or_else(|| "unnamed".to_string());
    let (base_line, base_name) =
        base.ok_or(ModelError::MissingSection { section: "base" })?;
    let base_link_index = resolve_link(&links, base_line, &base_name)?;

    let mut joints = Vec::with_capacity(pending_joints.len());
    for pj in pending_joints {
        let parent = resolve_link(&links, pj.line, &pj.parent)?;
        let child = resolve_link(&links, pj.line, &pj.child)?;
        let norm = pj.axis.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > super::AXIS_UNIT_TOL {
            return Err(ModelError::NonUnitAxis {
                name: pj.name,
                norm,
            });
        }
        joints.push(JointSpec {
            name: pj.name,
            parent,
            child,
            origin_position: pj.origin_position,
            origin_rotation: pj.origin_rotation,
            axis: Unit::new_unchecked(pj.axis / norm),
            kind: JointKind::Revolute,
            limits: pj.limits,
        });
    }

    let instrumented_links = instrumented
        .into_iter()
        .map(|(line, n)| resolve_link(&links, line, &n))
        .collect::<Result<Vec<_>, _>>()?;
    if instrumented_links.is_empty() {
        return Err(ModelError::MissingSection {
            section: "instrumented",
        });
    }
    let upper_joints = upper
        .into_iter()
        .map(|(line, n)| resolve_joint(&joints, line, &n))
        .collect::<Result<Vec<_>, _>>()?;
    let lower_joints = lower
        .into_iter()
        .map(|(line, n)| resolve_joint(&joints, line, &n))
        .collect::<Result<Vec<_>, _>>()?;

    RigidBodyModel::new(
        name,
        links,
        joints,
        base_link_index,
        instrumented_links,
        upper_joints,
        lower_joints,
    )
}

fn parse_joint(
    line: usize,
    rest: &[&str],
    existing: &[PendingJoint],
) -> Result<PendingJoint, ModelError> {
    let Some((name, attrs)) = rest.split_first() else {
        return Err(syntax(line, "joint requires a name"));
    };
    if existing.iter().any(|j| j.name == *name) {
        return Err(ModelError::DuplicateName {
            line,
            kind: "joint",
            name: name.to_string(),
        });
    }
    let mut parent = None;
    let mut child = None;
    let mut origin_position = None;
    let mut origin_rotation = Matrix3::identity();
    let mut axis = None;
    let mut limits = None;
    for attr in attrs {
        let Some((key, value)) = attr.split_once('=') else {
            return Err(syntax(line, &format!("expected key=value, got `{attr}`")));
        };
        match key {
            "parent" => parent = Some(value.to_string()),
            "child" => child = Some(value.to_string()),
            "origin" => origin_position = Some(parse_vec3(line, key, value)?),
            "axis" => axis = Some(parse_vec3(line, key, value)?),
            "rpy" => {
                let v = parse_vec3(line, key, value)?;
                origin_rotation = Rotation3::from_euler_angles(v.x, v.y, v.z).into_inner();
            }
            "rot" => {
                let e = parse_numbers(line, key, value, 9)?;
                let m = Matrix3::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]);
                let gram = m.transpose() * m;
                let mut dev: f64 = 0.0;
                for r in 0..3 {
                    for c in 0..3 {
                        let expected = if r == c { 1.0 } else { 0.0 };
                        dev = dev.max((gram[(r, c)] - expected).abs());
                    }
                }
                if dev > 1e-6 || !dev.is_finite() || m.determinant() < 0.0 {
                    return Err(syntax(
                        line,
                        &format!("`rot` entries are not a rotation matrix (deviation {dev:.2e})"),
                    ));
                }
                origin_rotation = m;
            }
            "limits" => {
                let pair = parse_numbers(line, key, value, 2)?;
                limits = Some((pair[0], pair[1]));
            }
            other => {
                return Err(syntax(line, &format!("unknown joint attribute `{other}`")));
            }
        }
    }
    let missing = |what: &str| syntax(line, &format!("joint `{name}` is missing `{what}`"));
    Ok(PendingJoint {
        line,
        name: name.to_string(),
        parent: parent.ok_or_else(|| missing("parent"))?,
        child: child.ok_or_else(|| missing("child"))?,
        origin_position: origin_position.ok_or_else(|| missing("origin"))?,
        origin_rotation,
        axis: axis.ok_or_else(|| missing("axis"))?,
        limits: limits.ok_or_else(|| missing("limits"))?,
    })
}

fn parse_vec3(line: usize, key: &str, value: &str) -> Result<Vector3<f64>, ModelError> {
    let nums = parse_numbers(line, key, value, 3)?;
    Ok(Vector3::new(nums[0], nums[1], nums[2]))
}

fn parse_numbers(
    line: usize,
    key: &str,
    value: &str,
    count: usize,
) -> Result<Vec<f64>, ModelError> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != count {
        return Err(syntax(
            line,
            &format!("`{key}` expects {count} comma-separated numbers, got `{value}`"),
        ));
    }
    parts
        .iter()
        .map(|p| {
            p.trim().parse::<f64>().map_err(|_| {
                syntax(line, &format!("`{key}`: `{p}` is not a number"))
            })
        })
        .collect()
}

fn expect_one<'a>(line: usize, directive: &str, rest: &[&'a str]) -> Result<&'a str, ModelError> {
    match rest {
        [one] => Ok(one),
        _ => Err(syntax(
            line,
            &format!("`{directive}` expects exactly one argument"),
        )),
    }
}

fn syntax(line: usize, message: &str) -> ModelError {
    ModelError::Syntax {
        line,
        column: 1,
        message: message.to_string(),
    }
}

fn resolve_link(links: &[LinkSpec], line: usize, name: &str) -> Result<usize, ModelError> {
    links
        .iter()
        .position(|l| l.name == name)
        .ok_or_else(|| ModelError::UnknownLink {
            line,
            name: name.to_string(),
        })
}

fn resolve_joint(joints: &[JointSpec], line: usize, name: &str) -> Result<usize, ModelError> {
    joints
        .iter()
        .position(|j| j.name == name)
        .ok_or_else(|| ModelError::UnknownJoint {
            line,
            name: name.to_string(),
        })
}

/// Canonical serialization. Parsing the output reproduces an equal model, so
/// `content_hash` is stable across parse/serialize round trips.
pub fn serialize_model(model: &RigidBodyModel) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    writeln!(out, "model {}", model.name()).unwrap();
    for link in model.links() {
        writeln!(out, "link {}", link.name).unwrap();
    }
    for joint in model.joints() {
        write!(
            out,
            "joint {} parent={} child={} origin={},{},{} axis={},{},{}",
            joint.name,
            model.links()[joint.parent].name,
            model.links()[joint.child].name,
            joint.origin_position.x,
            joint.origin_position.y,
            joint.origin_position.z,
            joint.axis.x,
            joint.axis.y,
            joint.axis.z,
        )
        .unwrap();
        if joint.origin_rotation != Matrix3::identity() {
            // Emit the matrix entries directly: the shortest-roundtrip float
            // formatting makes serialize/parse/serialize bitwise idempotent,
            // which an Euler-angle recovery would not be.
            let m = &joint.origin_rotation;
            write!(
                out,
                " rot={},{},{},{},{},{},{},{},{}",
                m[(0, 0)],
                m[(0, 1)],
                m[(0, 2)],
                m[(1, 0)],
                m[(1, 1)],
                m[(1, 2)],
                m[(2, 0)],
                m[(2, 1)],
                m[(2, 2)]
            )
            .unwrap();
        }
        writeln!(out, " limits={},{}", joint.limits.0, joint.limits.1).unwrap();
    }
    writeln!(out, "base {}", model.links()[model.base_link_index()].name).unwrap();
    let mut line = String::from("instrumented");
    for &l in model.instrumented_links() {
        line.push(' ');
        line.push_str(&model.links()[l].name);
    }
    writeln!(out, "{line}").unwrap();
    if !model.upper_joints().is_empty() {
        let mut line = String::from("upper");
        for &j in model.upper_joints() {
            line.push(' ');
            line.push_str(&model.joints()[j].name);
        }
        writeln!(out, "{line}").unwrap();
    }
    if !model.lower_joints().is_empty() {
        let mut line = String::from("lower");
        for &j in model.lower_joints() {
            line.push(' ');
            line.push_str(&model.joints()[j].name);
        }
        writeln!(out, "{line}").unwrap();
    }
    out
}
