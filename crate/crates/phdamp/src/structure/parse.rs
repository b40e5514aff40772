//! Structure config parsing and emission.
//!
//! The format is TOML with a `[damping]` table and `[[nodes]]`,
//! `[[elements]]`, `[[actuators]]` entry arrays; all quantities are SI
//! (m, Pa, kg/m^3, m^2, m^4). Unknown fields are rejected by name.

use super::{
    ActuatorSpec, DampingSpec, DofMask, ElementKind, ElementSpec, NodeSpec, StructureError,
    StructureSpec,
};
use serde::Deserialize;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStructure {
    damping: RawDamping,
    #[serde(default)]
    nodes: Vec<RawNode>,
    #[serde(default)]
    elements: Vec<RawElement>,
    #[serde(default)]
    actuators: Vec<RawActuator>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDamping {
    alpha_mass: f64,
    alpha_stiffness: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: usize,
    position: [f64; 3],
    #[serde(default)]
    constrained: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawElement {
    kind: String,
    nodes: [usize; 2],
    youngs_modulus: f64,
    density: f64,
    area: f64,
    #[serde(default)]
    moment_y: f64,
    #[serde(default)]
    moment_z: f64,
    #[serde(default)]
    shear_modulus: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawActuator {
    nodes: [usize; 2],
    #[serde(default)]
    direction: Option<[f64; 3]>,
}

/// Parse a structure config document. Schema violations name the offending
/// field; reference and geometry problems name the entry.
pub fn parse_structure_spec(doc: &str) -> Result<StructureSpec, StructureError> {
    let raw: RawStructure =
        toml::from_str(doc).map_err(|e| StructureError::Parse(e.to_string()))?;

    let mut nodes = Vec::with_capacity(raw.nodes.len());
    for n in &raw.nodes {
        nodes.push(NodeSpec {
            id: n.id,
            position: n.position,
            constrained: DofMask::from_names(&n.constrained)?,
        });
    }

    let mut elements = Vec::with_capacity(raw.elements.len());
    for (i, e) in raw.elements.iter().enumerate() {
        let kind = match e.kind.as_str() {
            "beam" => ElementKind::Beam,
            "link" => ElementKind::Link,
            other => {
                return Err(StructureError::Parse(format!(
                    "element {i}: unknown kind `{other}` (expected `beam` or `link`)"
                )))
            }
        };
        elements.push(ElementSpec {
            kind,
            nodes: e.nodes,
            youngs_modulus: e.youngs_modulus,
            density: e.density,
            area: e.area,
            moment_y: e.moment_y,
            moment_z: e.moment_z,
            shear_modulus: e.shear_modulus,
        });
    }

    let actuators = raw
        .actuators
        .iter()
        .map(|a| ActuatorSpec {
            nodes: a.nodes,
            direction: a.direction,
        })
        .collect();

    let spec = StructureSpec {
        nodes,
        elements,
        actuators,
        damping: DampingSpec {
            alpha_mass: raw.damping.alpha_mass,
            alpha_stiffness: raw.damping.alpha_stiffness,
        },
    };
    spec.validate()?;
    Ok(spec)
}

/// Round-trip faithful float: shortest representation that parses back to
/// the same f64, forced into TOML float syntax.
pub(crate) fn fmt_f64(v: f64) -> String {
    let s = format!("{v}");
    if s.contains('.') || s.contains('e') || s.contains('E') {
        s
    } else {
        format!("{s}.0")
    }
}

/// Emit a structure config document; `parse_structure_spec` recovers the
/// spec exactly.
pub fn write_structure_spec(spec: &StructureSpec) -> String {
    let mut out = String::new();
    out.push_str("# Frame structure config. SI units: m, Pa, kg/m^3, m^2, m^4.\n\n");
    out.push_str("[damping]\n");
    out.push_str(&format!("alpha_mass = {}\n", fmt_f64(spec.damping.alpha_mass)));
    out.push_str(&format!(
        "alpha_stiffness = {}\n",
        fmt_f64(spec.damping.alpha_stiffness)
    ));

    for n in &spec.nodes {
        out.push_str("\n[[nodes]]\n");
        out.push_str(&format!("id = {}\n", n.id));
        out.push_str(&format!(
            "position = [{}, {}, {}]\n",
            fmt_f64(n.position[0]),
            fmt_f64(n.position[1]),
            fmt_f64(n.position[2])
        ));
        let names = n.constrained.names();
        if !names.is_empty() {
            let quoted: Vec<String> = names.iter().map(|s| format!("\"{s}\"")).collect();
            out.push_str(&format!("constrained = [{}]\n", quoted.join(", ")));
        }
    }

    for e in &spec.elements {
        out.push_str("\n[[elements]]\n");
        out.push_str(&format!(
            "kind = \"{}\"\n",
            match e.kind {
                ElementKind::Beam => "beam",
                ElementKind::Link => "link",
            }
        ));
        out.push_str(&format!("nodes = [{}, {}]\n", e.nodes[0], e.nodes[1]));
        out.push_str(&format!("youngs_modulus = {}\n", fmt_f64(e.youngs_modulus)));
        out.push_str(&format!("density = {}\n", fmt_f64(e.density)));
        out.push_str(&format!("area = {}\n", fmt_f64(e.area)));
        if e.kind == ElementKind::Beam {
            out.push_str(&format!("moment_y = {}\n", fmt_f64(e.moment_y)));
            out.push_str(&format!("moment_z = {}\n", fmt_f64(e.moment_z)));
        }
        if let Some(g) = e.shear_modulus {
            out.push_str(&format!("shear_modulus = {}\n", fmt_f64(g)));
        }
    }

    for a in &spec.actuators {
        out.push_str("\n[[actuators]]\n");
        out.push_str(&format!("nodes = [{}, {}]\n", a.nodes[0], a.nodes[1]));
        if let Some(d) = a.direction {
            out.push_str(&format!(
                "direction = [{}, {}, {}]\n",
                fmt_f64(d[0]),
                fmt_f64(d[1]),
                fmt_f64(d[2])
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::{generate_frame, ActuatorLayout, FrameMaterial};

    const MINIMAL: &str = r#"
[damping]
alpha_mass = 0.05
alpha_stiffness = 0.005

[[nodes]]
id = 0
position = [0.0, 0.0, 0.0]
constrained = ["ux", "uy", "uz", "rx", "ry", "rz"]

[[nodes]]
id = 1
position = [2.0, 0.0, 0.0]

[[elements]]
kind = "link"
nodes = [0, 1]
youngs_modulus = 2.1e11
density = 7850.0
area = 5.0e-3

[[actuators]]
nodes = [0, 1]
"#;

    #[test]
    fn parses_minimal_two_node_document() {
        let spec = parse_structure_spec(MINIMAL).unwrap();
        assert_eq!(spec.nodes.len(), 2);
        assert_eq!(spec.elements.len(), 1);
        assert_eq!(spec.actuators.len(), 1);
        assert_eq!(spec.n_free_dofs(), 6);
        assert_eq!(spec.damping.alpha_stiffness, 0.005);
    }

    #[test]
    fn dangling_node_reference_is_an_error() {
        let doc = MINIMAL.replace("nodes = [0, 1]\nyoungs_modulus", "nodes = [0, 7]\nyoungs_modulus");
        let err = parse_structure_spec(&doc).unwrap_err();
        match err {
            StructureError::DanglingElementNode { node: 7, .. } => {}
            other => panic!("expected dangling element node, got {other:?}"),
        }
    }

    #[test]
    fn zero_length_element_is_an_error() {
        let doc = MINIMAL.replace("position = [2.0, 0.0, 0.0]", "position = [0.0, 0.0, 0.0]");
        let err = parse_structure_spec(&doc).unwrap_err();
        assert!(matches!(err, StructureError::DegenerateElement { index: 0, .. }));
    }

    #[test]
    fn unknown_field_is_named() {
        let doc = MINIMAL.replace("area = 5.0e-3", "area = 5.0e-3\nwobble = 1.0");
        let err = parse_structure_spec(&doc).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("wobble"), "error should name the field: {msg}");
    }

    #[test]
    fn emitted_document_round_trips_exactly() {
        let spec = generate_frame(
            6,
            2.0,
            3.0,
            &FrameMaterial::default(),
            ActuatorLayout::ThreeStorey,
        )
        .unwrap();
        let doc = write_structure_spec(&spec);
        let back = parse_structure_spec(&doc).unwrap();
        assert_eq!(spec, back);
    }
}
