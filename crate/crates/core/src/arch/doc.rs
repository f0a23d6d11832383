//! The `obfunas-arch/v1` JSON document.

use serde::{Deserialize, Serialize};

use super::{
    canonicalize, validate_architecture, ArchError, Architecture, Backbone, CellGraph, Family,
    OpLabel,
};

pub const ARCH_SCHEMA: &str = "obfunas-arch/v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchDoc {
    schema: String,
    family: Family,
    stem_channels: usize,
    num_stacks: usize,
    cells_per_stack: usize,
    cell: CellDoc,
    input_shape: [usize; 3],
    num_classes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellDoc {
    node_ops: Vec<OpLabel>,
    edges: Vec<[usize; 2]>,
}

impl From<&Architecture> for ArchDoc {
    fn from(a: &Architecture) -> Self {
        let bb = &a.backbone;
        ArchDoc {
            schema: ARCH_SCHEMA.to_string(),
            family: bb.family,
            stem_channels: bb.stem_channels,
            num_stacks: bb.num_stacks,
            cells_per_stack: bb.cells_per_stack,
            cell: CellDoc {
                node_ops: a.cell.node_ops.clone(),
                edges: a.cell.edges.iter().map(|&(s, t)| [s, t]).collect(),
            },
            input_shape: bb.input_shape,
            num_classes: bb.num_classes,
        }
    }
}

/// Compact JSON with sorted keys. Does not canonicalize or validate.
pub(crate) fn canonical_document(arch: &Architecture) -> String {
    let value = serde_json::to_value(ArchDoc::from(arch)).expect("architecture serializes");
    serde_json::to_string(&value).expect("json value serializes")
}

pub fn parse_architecture(text: &str) -> Result<Architecture, ArchError> {
    let doc: ArchDoc =
        serde_json::from_str(text).map_err(|e| ArchError::Schema(e.to_string()))?;
    if doc.schema != ARCH_SCHEMA {
        return Err(ArchError::Schema(format!(
            "schema must be \"{ARCH_SCHEMA}\", found \"{}\"",
            doc.schema
        )));
    }
    for (name, value) in [
        ("stem_channels", doc.stem_channels),
        ("num_stacks", doc.num_stacks),
        ("cells_per_stack", doc.cells_per_stack),
        ("num_classes", doc.num_classes),
    ] {
        if value == 0 {
            return Err(ArchError::Schema(format!("{name} must be positive")));
        }
    }
    if doc.input_shape.contains(&0) {
        return Err(ArchError::Schema("input_shape entries must be positive".into()));
    }
    let arch = Architecture {
        backbone: Backbone {
            family: doc.family,
            stem_channels: doc.stem_channels,
            num_stacks: doc.num_stacks,
            cells_per_stack: doc.cells_per_stack,
            input_shape: doc.input_shape,
            num_classes: doc.num_classes,
        },
        cell: CellGraph {
            node_ops: doc.cell.node_ops,
            edges: doc.cell.edges.into_iter().map(|[s, t]| (s, t)).collect(),
        },
    };
    let report = validate_architecture(&arch);
    if !report.ok {
        return Err(ArchError::Invalid(report));
    }
    Ok(arch)
}

/// Canonical document: nodes in canonical order, sorted edges and keys,
/// no insignificant whitespace.
pub fn serialize_architecture(arch: &Architecture) -> Result<String, ArchError> {
    let report = validate_architecture(arch);
    if !report.ok {
        return Err(ArchError::Invalid(report));
    }
    Ok(canonical_document(&canonicalize(arch)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{Activation, ConvSpec};

    fn minimal() -> Architecture {
        Architecture::new(
            Backbone {
                family: Family::CellStack,
                stem_channels: 4,
                num_stacks: 1,
                cells_per_stack: 1,
                input_shape: [3, 8, 8],
                num_classes: 10,
            },
            CellGraph::chain(&[OpLabel::conv3x3()]),
        )
    }

    const MINIMAL: &str = r#"{"cell":{"edges":[[0,1],[1,2]],"node_ops":[{"kind":"input"},{"kind":"conv3x3-bn-relu"},{"kind":"output"}]},"cells_per_stack":1,"family":"cell-stack","input_shape":[3,8,8],"num_classes":10,"num_stacks":1,"schema":"obfunas-arch/v1","stem_channels":4}"#;

    #[test]
    fn minimal_chain_document() {
        assert_eq!(serialize_architecture(&minimal()).unwrap(), MINIMAL);
        assert_eq!(parse_architecture(MINIMAL).unwrap(), minimal());
    }

    #[test]
    fn missing_cell_names_field() {
        let text = MINIMAL.replace(r#""cell":{"edges":[[0,1],[1,2]],"node_ops":[{"kind":"input"},{"kind":"conv3x3-bn-relu"},{"kind":"output"}]},"#, "");
        let err = parse_architecture(&text).unwrap_err();
        assert!(matches!(&err, ArchError::Schema(m) if m.contains("`cell`")), "{err}");
    }

    #[test]
    fn zero_stem_channels_rejected() {
        let text = MINIMAL.replace(r#""stem_channels":4"#, r#""stem_channels":0"#);
        let err = parse_architecture(&text).unwrap_err();
        assert!(matches!(&err, ArchError::Schema(m) if m == "stem_channels must be positive"));
    }

    #[test]
    fn edge_insertion_order_irrelevant() {
        let mut a = minimal();
        a.cell = CellGraph {
            node_ops: vec![OpLabel::Input, OpLabel::conv3x3(), OpLabel::conv1x1(), OpLabel::Output],
            edges: vec![(0, 1), (1, 2), (2, 3), (0, 3)],
        };
        let mut b = a.clone();
        b.cell.edges = vec![(0, 3), (2, 3), (0, 1), (1, 2)];
        assert_eq!(serialize_architecture(&a).unwrap(), serialize_architecture(&b).unwrap());
    }

    #[test]
    fn generic_dag_keeps_family_and_params() {
        let spec = ConvSpec {
            channels: Some(6),
            bias: true,
            ..ConvSpec::same(5, false, Activation::Swish)
        };
        let mut a = minimal();
        a.backbone.family = Family::GenericDag;
        a.cell = CellGraph::chain(&[OpLabel::Conv(spec), OpLabel::ZeroGatedSum]);
        let doc = serialize_architecture(&a).unwrap();
        assert!(doc.contains(r#""family":"generic-dag""#));
        assert!(doc.contains(r#""activation":"swish""#));
        assert_eq!(parse_architecture(&doc).unwrap(), a);
    }

    #[test]
    fn invalid_graph_rejected_on_parse() {
        let text = MINIMAL.replace("[[0,1],[1,2]]", "[[0,1],[2,1]]");
        assert!(matches!(parse_architecture(&text), Err(ArchError::Invalid(_))));
    }

    #[test]
    fn unknown_op_kind_is_schema_error() {
        let text = MINIMAL.replace("conv3x3-bn-relu", "conv7x7");
        assert!(matches!(parse_architecture(&text), Err(ArchError::Schema(_))));
    }
}
