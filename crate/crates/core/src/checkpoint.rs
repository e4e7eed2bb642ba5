//! Versioned text checkpoint holding network parameters and the frozen
//! prototypes they were trained with.
//!
//! Every line is tab-separated (shown as spaces below), first field is the record kind:
//!
//! ```text
//! lexrel-checkpoint  1
//! dim  <d>
//! sharing  shared|per-relation
//! meta_heads  0|1
//! final_head  0|1
//! relation  <name>  0|1            (1 marks the random class; one line per relation, in order)
//! prototype  <name>  <count>  <v1 v2 ... vd>
//! block  <name>  <len>  <v1 v2 ...>
//! end
//! ```
//!
//! Floats use shortest round-trip formatting, so reading a checkpoint back
//! reproduces every parameter bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::{RelationLabel, RelationSet};
use crate::error::{Error, Result};
use crate::network::{CellSharing, Linear, NetworkParams, ParamBlocks, SrrCellParams, Trunk};
use crate::prototypes::PrototypeSet;

pub const MAGIC: &str = "lexrel-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub prototypes: PrototypeSet,
}

fn join(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
    parts.join(" ")
}

fn skeleton(
    dim: usize,
    relations: &RelationSet,
    sharing: CellSharing,
    meta: bool,
    fin: bool,
) -> NetworkParams {
    let t = relations.num_tasks();
    let n_cells = match sharing {
        CellSharing::Shared => 1,
        CellSharing::PerRelation => t,
    };
    NetworkParams {
        dim,
        relations: relations.clone(),
        trunk: Trunk {
            cells: (0..n_cells).map(|_| SrrCellParams::zeros(dim)).collect(),
            dense: Linear::zeros(crate::network::dense_input_width(dim, t), dim),
        },
        meta_heads: if meta {
            (0..t).map(|_| Linear::zeros(dim, 2)).collect()
        } else {
            Vec::new()
        },
        final_head: fin.then(|| Linear::zeros(dim, relations.len())),
    }
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let p = &self.params;
        writeln!(out, "{MAGIC}\t{VERSION}")?;
        writeln!(out, "dim\t{}", p.dim)?;
        writeln!(out, "sharing\t{}", p.sharing().as_str())?;
        writeln!(out, "meta_heads\t{}", u8::from(!p.meta_heads.is_empty()))?;
        writeln!(out, "final_head\t{}", u8::from(p.final_head.is_some()))?;
        for l in p.relations.labels() {
            writeln!(out, "relation\t{}\t{}", l.name, u8::from(l.is_random))?;
        }
        for (slot, (proto, count)) in self
            .prototypes
            .iter()
            .zip(self.prototypes.source_counts())
            .enumerate()
        {
            let name = p.relations.name(p.relations.task_relations()[slot]);
            writeln!(out, "prototype\t{name}\t{count}\t{}", join(proto))?;
        }
        for b in p.blocks() {
            writeln!(
                out,
                "block\t{}\t{}\t{}",
                b.name,
                b.values.len(),
                join(b.values)
            )?;
        }
        writeln!(out, "end")?;
        out.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Checkpoint(format!("line {line}: {msg}"));
        let mut dim = None;
        let mut sharing = None;
        let mut meta = None;
        let mut fin = None;
        let mut labels = Vec::new();
        let mut protos: Vec<(String, usize, Vec<f64>)> = Vec::new();
        let mut blocks: Vec<(String, Vec<f64>)> = Vec::new();
        let mut ended = false;

        for (i, line) in reader.lines().enumerate() {
            let n = i + 1;
            let line = line.map_err(|e| Error::Checkpoint(e.to_string()))?;
            let f: Vec<&str> = line.split('\t').collect();
            let parse_values = |s: &str| -> Result<Vec<f64>> {
                s.split_ascii_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| bad(n, format!("bad number {t:?}")))
                    })
                    .collect()
            };
            match f.as_slice() {
                [MAGIC, v] if n == 1 => {
                    if *v != VERSION.to_string() {
                        return Err(bad(n, format!("unsupported version {v}")));
                    }
                }
                _ if n == 1 => return Err(bad(n, "not a checkpoint".into())),
                ["dim", d] => dim = Some(d.parse::<usize>().map_err(|_| bad(n, "bad dim".into()))?),
                ["sharing", s] => {
                    sharing = Some(
                        CellSharing::parse(s)
                            .ok_or_else(|| bad(n, format!("bad sharing {s:?}")))?,
                    )
                }
                ["meta_heads", v] => meta = Some(*v == "1"),
                ["final_head", v] => fin = Some(*v == "1"),
                ["relation", name, r] => labels.push(RelationLabel {
                    name: name.to_string(),
                    is_random: *r == "1",
                }),
                ["prototype", name, count, values] => {
                    let count = count.parse().map_err(|_| bad(n, "bad count".into()))?;
                    protos.push((name.to_string(), count, parse_values(values)?));
                }
                ["block", name, len, values] => {
                    let values = parse_values(values)?;
                    if len.parse::<usize>().ok() != Some(values.len()) {
                        return Err(bad(n, format!("block {name} length disagrees with header")));
                    }
                    blocks.push((name.to_string(), values));
                }
                ["end"] => {
                    ended = true;
                    break;
                }
                _ => {
                    return Err(bad(
                        n,
                        format!("unrecognized record {:?}", f.first().unwrap_or(&"")),
                    ))
                }
            }
        }
        if !ended {
            return Err(Error::Checkpoint("truncated: missing end record".into()));
        }
        let (dim, sharing, meta, fin) = match (dim, sharing, meta, fin) {
            (Some(d), Some(s), Some(m), Some(f)) => (d, s, m, f),
            _ => return Err(Error::Checkpoint("missing header field".into())),
        };
        let relations = RelationSet::new(labels)?;

        let mut params = skeleton(dim, &relations, sharing, meta, fin);
        let expected: Vec<(String, usize)> = params
            .blocks()
            .iter()
            .map(|b| (b.name.clone(), b.values.len()))
            .collect();
        if expected.len() != blocks.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                expected.len(),
                blocks.len()
            )));
        }
        for ((dst, (name, len)), (got_name, values)) in
            params.blocks_mut().into_iter().zip(&expected).zip(blocks)
        {
            if *name != got_name || *len != values.len() {
                return Err(Error::Checkpoint(format!(
                    "block {got_name} ({}) where {name} ({len}) was expected",
                    values.len()
                )));
            }
            dst.copy_from_slice(&values);
        }
        if let Some(block) = params.first_non_finite() {
            return Err(Error::NonFinite(format!("checkpoint block {block}")));
        }

        if protos.len() != relations.num_tasks() {
            return Err(Error::Checkpoint(format!(
                "{} prototypes for {} relations",
                protos.len(),
                relations.num_tasks()
            )));
        }
        let mut vectors = Vec::with_capacity(protos.len());
        let mut counts = Vec::with_capacity(protos.len());
        for (slot, (name, count, v)) in protos.into_iter().enumerate() {
            let want = relations.name(relations.task_relations()[slot]);
            if name != want {
                return Err(Error::Checkpoint(format!(
                    "prototype {name} where {want} was expected"
                )));
            }
            vectors.push(v);
            counts.push(count);
        }
        let prototypes = PrototypeSet::from_parts(dim, vectors, counts)?;
        Ok(Self { params, prototypes })
    }
}
