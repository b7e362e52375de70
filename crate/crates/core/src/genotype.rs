//! Discrete architectures and their text format.
//!
//! ```text
//! genotype-v1
//! feature_cell: 0:conv_3x3 1:skip_connect | 1:conv_3x3 2:conv_3x3 | 2:conv_3x3 3:skip_connect
//! matching_cell: 0:conv_3x3 1:conv_3x3 | 0:conv_3x3 2:conv_3x3 | 2:conv_3x3 3:conv_3x3
//! feature_path: 0 1 1 2 1 0
//! matching_path: 0 1 2 3 2 1 0 0 1 1 0 0
//! extra_skips: 2-5 5-9
//! ```
//!
//! A cell lists its three intermediate nodes (2, 3, 4) separated by `|`; each
//! node has two `source:operation` edges, where sources 0 and 1 are the cell
//! inputs and 2.. are earlier intermediate nodes. Paths give the level
//! (0 = finest) of every layer. Extra skips are `from-to` pairs of
//! 0-based matching layer indices; the output of layer `from` is added to the
//! output of layer `to`. Blank lines and lines starting with `#` are ignored.
//! The canonical form has exactly the six lines above, edges sorted by
//! source, and single spaces.

use std::fmt::Write as _;

use crate::cell::{OpKind, INPUT_NODES, INTERMEDIATE_NODES};
use crate::error::{Error, Result};
use crate::trellis::DOWNSAMPLING;

pub const HEADER: &str = "genotype-v1";

/// One chosen edge: `(source node, operation)`.
pub type Edge = (usize, OpKind);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellGenotype {
    /// `nodes[k]` holds the two edges entering intermediate node `k + 2`.
    pub nodes: Vec<[Edge; 2]>,
}

impl CellGenotype {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.nodes.len() != INTERMEDIATE_NODES {
            return Err(format!(
                "expected {INTERMEDIATE_NODES} intermediate nodes, got {}",
                self.nodes.len()
            ));
        }
        for (k, edges) in self.nodes.iter().enumerate() {
            let j = k + INPUT_NODES;
            for &(src, op) in edges {
                if src >= j {
                    return Err(format!("node {j} cannot take input from node {src}"));
                }
                if op == OpKind::Zero {
                    return Err(format!("node {j} selects the zero operation"));
                }
            }
            if edges[0].0 == edges[1].0 {
                return Err(format!(
                    "node {j} has two edges from node {}",
                    edges[0].0
                ));
            }
        }
        Ok(())
    }

    fn canonical(mut self) -> Self {
        for e in &mut self.nodes {
            e.sort_by_key(|&(src, op)| (src, op));
        }
        self
    }

    fn render(&self) -> String {
        self.nodes
            .iter()
            .map(|edges| {
                edges
                    .iter()
                    .map(|(s, op)| format!("{s}:{op}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join(" | ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Genotype {
    pub feature_cell: CellGenotype,
    pub matching_cell: CellGenotype,
    pub feature_path: Vec<usize>,
    pub matching_path: Vec<usize>,
    pub extra_skips: Vec<(usize, usize)>,
}

pub const DEFAULT_EXTRA_SKIPS: [(usize, usize); 2] = [(2, 5), (5, 9)];

/// Checks that a path starts at level 0, stays within the trellis and never
/// moves by more than one level per layer.
pub fn validate_path(path: &[usize]) -> std::result::Result<(), String> {
    let Some(&first) = path.first() else {
        return Err("path is empty".into());
    };
    if first != 0 {
        return Err(format!("layer 0 is at level {first}, paths start at level 0"));
    }
    for (l, &s) in path.iter().enumerate() {
        if s >= DOWNSAMPLING.len() {
            return Err(format!("layer {l} is at level {s}, the deepest level is {}", DOWNSAMPLING.len() - 1));
        }
        if l > 0 && s.abs_diff(path[l - 1]) > 1 {
            return Err(format!(
                "layer {l} jumps from level {} to level {s}",
                path[l - 1]
            ));
        }
    }
    Ok(())
}

impl Genotype {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::InvalidGenotype(format!("{field}: {msg}")));
        if let Err(m) = self.feature_cell.validate() {
            return bad("feature_cell", m);
        }
        if let Err(m) = self.matching_cell.validate() {
            return bad("matching_cell", m);
        }
        if let Err(m) = validate_path(&self.feature_path) {
            return bad("feature_path", m);
        }
        if let Err(m) = validate_path(&self.matching_path) {
            return bad("matching_path", m);
        }
        for &(from, to) in &self.extra_skips {
            if from >= to || to >= self.matching_path.len() {
                return bad(
                    "extra_skips",
                    format!(
                        "skip {from}-{to} must go forward within the {} matching layers",
                        self.matching_path.len()
                    ),
                );
            }
        }
        Ok(())
    }

    /// Canonical text; `parse(to_text(g)) == g` and the text is byte-stable.
    pub fn to_text(&self) -> String {
        let levels = |p: &[usize]| p.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let skips = self
            .extra_skips
            .iter()
            .map(|(a, b)| format!(" {a}-{b}"))
            .collect::<String>();
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER}");
        let _ = writeln!(s, "feature_cell: {}", self.feature_cell.render());
        let _ = writeln!(s, "matching_cell: {}", self.matching_cell.render());
        let _ = writeln!(s, "feature_path: {}", levels(&self.feature_path));
        let _ = writeln!(s, "matching_path: {}", levels(&self.matching_path));
        let _ = writeln!(s, "extra_skips:{skips}");
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let perr = |line: usize, field: &str, message: String| Error::GenotypeParse {
            line,
            field: field.into(),
            message,
        };
        match lines.next() {
            Some((_, HEADER)) => {}
            Some((n, other)) => {
                return Err(perr(n, "header", format!("expected `{HEADER}`, found `{other}`")))
            }
            None => return Err(perr(1, "header", "empty genotype".into())),
        }
        let mut field = |name: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, l)) => match l.split_once(':') {
                    Some((key, rest)) if key.trim() == name => Ok((n, rest.trim().to_string())),
                    _ => Err(perr(n, name, format!("expected `{name}:`, found `{l}`"))),
                },
                None => Err(perr(0, name, "missing field".into())),
            }
        };
        let cell = |(n, body): (usize, String), name: &str| -> Result<CellGenotype> {
            let nodes = body
                .split('|')
                .map(|node| {
                    let edges: Vec<Edge> = node
                        .split_whitespace()
                        .map(|tok| {
                            let (src, op) = tok
                                .split_once(':')
                                .ok_or_else(|| perr(n, name, format!("edge `{tok}` is not `source:operation`")))?;
                            let src = src
                                .parse()
                                .map_err(|_| perr(n, name, format!("invalid source node `{src}`")))?;
                            let op = op.parse().map_err(|e: String| perr(n, name, e))?;
                            Ok((src, op))
                        })
                        .collect::<Result<_>>()?;
                    <[Edge; 2]>::try_from(edges).map_err(|e| {
                        perr(n, name, format!("a node needs exactly 2 edges, found {}", e.len()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let g = CellGenotype { nodes }.canonical();
            g.validate().map_err(|m| perr(n, name, m))?;
            Ok(g)
        };
        let path = |(n, body): (usize, String), name: &str| -> Result<Vec<usize>> {
            let p = body
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| perr(n, name, format!("invalid level `{t}`"))))
                .collect::<Result<Vec<usize>>>()?;
            validate_path(&p).map_err(|m| perr(n, name, m))?;
            Ok(p)
        };
        let feature_cell = cell(field("feature_cell")?, "feature_cell")?;
        let matching_cell = cell(field("matching_cell")?, "matching_cell")?;
        let feature_path = path(field("feature_path")?, "feature_path")?;
        let matching_path = path(field("matching_path")?, "matching_path")?;
        let (n, body) = field("extra_skips")?;
        let extra_skips = body
            .split_whitespace()
            .map(|t| {
                let pair = t.split_once('-').and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)));
                pair.ok_or_else(|| perr(n, "extra_skips", format!("invalid skip `{t}`, expected `from-to`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some((n, l)) = lines.next() {
            return Err(perr(n, "trailing", format!("unexpected line `{l}`")));
        }
        let g = Genotype {
            feature_cell,
            matching_cell,
            feature_path,
            matching_path,
            extra_skips,
        };
        g.validate().map_err(|e| perr(n, "extra_skips", e.to_string()))?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "genotype-v1
feature_cell: 0:conv_3x3 1:skip_connect | 1:conv_3x3 2:conv_3x3 | 2:conv_3x3 3:skip_connect
matching_cell: 0:conv_3x3 1:conv_3x3 | 0:conv_3x3 2:conv_3x3 | 2:conv_3x3 3:conv_3x3
feature_path: 0 1 1 2 1 0
matching_path: 0 1 2 3 2 1 0 0 1 1 0 0
extra_skips: 2-5 5-9
";

    #[test]
    fn canonical_text_round_trips() {
        let g = Genotype::parse(SAMPLE).unwrap();
        assert_eq!(g.to_text(), SAMPLE);
        assert_eq!(g.extra_skips, DEFAULT_EXTRA_SKIPS);
    }

    #[test]
    fn level_jump_names_the_layer() {
        let bad = SAMPLE.replace("feature_path: 0 1 1 2 1 0", "feature_path: 0 1 3 2 1 0");
        let err = Genotype::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("layer 2"), "{err}");
        assert!(err.contains("feature_path"), "{err}");
    }

    #[test]
    fn rejects_version_zero_op_and_duplicate_sources() {
        assert!(Genotype::parse(&SAMPLE.replace("genotype-v1", "genotype-v2")).is_err());
        let zero = SAMPLE.replace("0:conv_3x3 1:skip_connect", "0:zero 1:skip_connect");
        assert!(Genotype::parse(&zero).is_err());
        let dup = SAMPLE.replace("0:conv_3x3 1:skip_connect", "1:conv_3x3 1:skip_connect");
        assert!(Genotype::parse(&dup).is_err());
        let fwd = SAMPLE.replace("0:conv_3x3 1:skip_connect", "0:conv_3x3 2:skip_connect");
        assert!(Genotype::parse(&fwd).is_err());
        let start = SAMPLE.replace("feature_path: 0 1", "feature_path: 1 1");
        assert!(Genotype::parse(&start).is_err());
        let skip = SAMPLE.replace("5-9", "5-12");
        assert!(Genotype::parse(&skip).is_err());
    }

    #[test]
    fn comments_and_edge_order_are_normalised() {
        let loose = SAMPLE
            .replace("genotype-v1\n", "# searched on toy data\ngenotype-v1\n\n")
            .replace("0:conv_3x3 1:skip_connect", "1:skip_connect 0:conv_3x3");
        assert_eq!(Genotype::parse(&loose).unwrap().to_text(), SAMPLE);
    }

    #[test]
    fn empty_skip_list() {
        let s = SAMPLE.replace("extra_skips: 2-5 5-9", "extra_skips:");
        let g = Genotype::parse(&s).unwrap();
        assert!(g.extra_skips.is_empty());
        assert_eq!(g.to_text(), s);
    }
}
